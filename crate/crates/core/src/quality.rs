//! Output agreement of consolidated serving and of weight averaging with a
//! dedicated model, as the number of served variants grows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consolidate::{average_merge, consolidate};
use crate::engine::{build_device, dedicated_forward, divergence, RequestSpec};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::model::{derive_variant, init_base, HostStore, ModelConfig, ModelWeights};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSpec {
    pub config: ModelConfig,
    pub variant_counts: Vec<usize>,
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub max_new_tokens: usize,
    pub eps_expert: f64,
    pub eps_nonexpert: f64,
    /// Expert slots on the device; `None` means one full model's worth.
    pub capacity: Option<usize>,
    pub seed: u64,
    /// Independent base models; rows average over them. Base `b` uses seed
    /// `seed + BASE_STRIDE * b`.
    pub n_bases: usize,
}

pub const BASE_STRIDE: u64 = 1000;

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            config: ModelConfig::toy(),
            variant_counts: vec![2, 3, 4],
            n_prompts: 40,
            prompt_len: 20,
            max_new_tokens: 25,
            eps_expert: 0.05,
            eps_nonexpert: 0.05,
            capacity: None,
            seed: 0,
            n_bases: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub n_variants: usize,
    pub method: Method,
    pub token_match_rate: f64,
    pub mean_kl: f64,
}

/// Base model `seed`, variants `seed + 1 ..= seed + n`. The first variant is
/// the reference model.
pub fn make_variants(spec: &CompareSpec, n: usize) -> Result<Vec<ModelWeights>> {
    let base = init_base(spec.config, spec.seed)?;
    (1..=n as u64)
        .map(|i| derive_variant(&base, spec.seed + i, spec.eps_expert, spec.eps_nonexpert))
        .collect()
}

/// Prompts shared by every variant count.
pub fn make_prompts(spec: &CompareSpec) -> Vec<Vec<u32>> {
    let mut rng = SeededRng::with_stream(spec.seed, 7);
    (0..spec.n_prompts)
        .map(|_| (0..spec.prompt_len).map(|_| rng.below(spec.config.vocab) as u32).collect())
        .collect()
}

/// Mean agreement with the reference over `prompts` for both methods,
/// proposed first.
pub fn compare_models(models: &[ModelWeights], capacity: usize, prompts: &[Vec<u32>], max_new_tokens: usize)
    -> Result<[CompareRow; 2]> {
    let reference = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models to compare".into()))?;
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    let refs: Vec<&ModelWeights> = models.iter().collect();
    let (_, map) = consolidate(&refs, capacity)?;
    let store = HostStore::from_models(models.iter().cloned())?;
    let mut device = build_device(map, &store)?;
    let merged = average_merge(&refs)?;

    let (mut prop, mut avg) = ([0.0; 2], [0.0; 2]);
    for prompt in prompts {
        let req = RequestSpec {
            target: reference.id.clone(),
            prompt: prompt.clone(),
            max_new_tokens,
            eos_token: u32::MAX,
        };
        let want = dedicated_forward(reference, &req)?;
        let (got, _) = device.generate(&store, &req)?;
        let d = divergence(&want, &got)?;
        prop[0] += d.token_match_rate;
        prop[1] += d.mean_kl;
        let d = divergence(&want, &dedicated_forward(&merged, &req)?)?;
        avg[0] += d.token_match_rate;
        avg[1] += d.mean_kl;
    }
    let n = prompts.len() as f64;
    let row = |method, s: [f64; 2]| CompareRow {
        n_variants: models.len(),
        method,
        token_match_rate: s[0] / n,
        mean_kl: s[1] / n,
    };
    Ok([row(Method::Proposed, prop), row(Method::Average, avg)])
}

/// One proposed and one averaging row per variant count, each the mean over
/// all bases.
pub fn compare(spec: &CompareSpec) -> Result<Vec<CompareRow>> {
    spec.config.validate()?;
    if spec.variant_counts.iter().any(|&n| n == 0) || spec.n_bases == 0 {
        return Err(Error::InvalidConfig("variant counts and n_bases must be positive".into()));
    }
    let capacity = spec.capacity.unwrap_or(spec.config.n_locations());
    let mut rows = Vec::new();
    for &n in &spec.variant_counts {
        let mut sums = [[0.0; 2]; 2];
        for b in 0..spec.n_bases as u64 {
            let one = CompareSpec {
                seed: spec.seed + BASE_STRIDE * b,
                ..spec.clone()
            };
            let pair = compare_models(&make_variants(&one, n)?, capacity, &make_prompts(&one), spec.max_new_tokens)?;
            for (acc, r) in sums.iter_mut().zip(&pair) {
                acc[0] += r.token_match_rate;
                acc[1] += r.mean_kl;
            }
        }
        let k = spec.n_bases as f64;
        for (method, acc) in [Method::Proposed, Method::Average].into_iter().zip(sums) {
            rows.push(CompareRow {
                n_variants: n,
                method,
                token_match_rate: acc[0] / k,
                mean_kl: acc[1] / k,
            });
        }
    }
    Ok(rows)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Mean token match rate of `method` at `n` variants.
pub fn match_rate(rows: &[CompareRow], method: Method, n: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.method == method && r.n_variants == n)
        .map(|r| r.token_match_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CompareSpec {
        CompareSpec {
            config: ModelConfig {
                n_layers: 2,
                vocab: 64,
                ..ModelConfig::toy()
            },
            n_prompts: 3,
            prompt_len: 8,
            max_new_tokens: 6,
            n_bases: 1,
            ..CompareSpec::default()
        }
    }

    #[test]
    fn identical_models_match_exactly() {
        let spec = small();
        let a = make_variants(&spec, 1).unwrap().remove(0);
        let mut b = a.clone();
        b.id = crate::model::ModelId::from("copy");
        let rows = compare_models(&[a, b], spec.config.n_locations(), &make_prompts(&spec), 6).unwrap();
        for r in rows {
            assert_eq!(r.token_match_rate, 1.0);
            assert!(r.mean_kl < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn averaging_needs_two_variants() {
        let spec = CompareSpec {
            variant_counts: vec![1],
            ..small()
        };
        assert!(matches!(compare(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rows_per_count_and_csv() {
        let rows = compare(&small()).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].method, Method::Proposed);
        assert_eq!(rows[5].n_variants, 4);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.token_match_rate) && r.mean_kl >= 0.0));
        assert_eq!(match_rate(&rows, Method::Average, 3), Some(rows[3].token_match_rate));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_compare_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next(), Some("n_variants,method,token_match_rate,mean_kl"));
    }

    #[test]
    fn deterministic() {
        assert_eq!(compare(&small()).unwrap(), compare(&small()).unwrap());
    }

    #[test]
    fn rows_average_over_bases() {
        let two = CompareSpec { n_bases: 2, ..small() };
        let rows = compare(&two).unwrap();
        let first = compare(&small()).unwrap();
        let second = compare(&CompareSpec { seed: BASE_STRIDE, ..small() }).unwrap();
        for ((r, a), b) in rows.iter().zip(&first).zip(&second) {
            assert!((r.token_match_rate - (a.token_match_rate + b.token_match_rate) / 2.0).abs() < 1e-12);
            assert!((r.mean_kl - (a.mean_kl + b.mean_kl) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_variants() {
        let spec = CompareSpec {
            variant_counts: vec![0],
            ..small()
        };
        assert!(matches!(compare(&spec), Err(Error::InvalidConfig(_))));
    }
}
