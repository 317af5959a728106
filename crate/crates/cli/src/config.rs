//! Run configuration. Every field has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use moeshare::costmodel::{calibrate, default_params, LatencyParams, ParamsVariant, QosTargets, SINGLE_TARGETS};
use moeshare::model::{ModelConfig, ModelId};
use moeshare::sim::{Strategy, StrategyKind, WorkloadSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Master seed: base model, workload, prompts and the first sweep seed.
    pub seed: u64,
    /// Number of variants `gen-models` derives from the base.
    pub n_variants: usize,
    /// Explicit variant seeds; defaults to `seed + 1 ..= seed + n_variants`.
    pub variant_seeds: Option<Vec<u64>>,
    pub eps_expert: f64,
    pub eps_nonexpert: f64,
    /// Device expert slots; defaults to one model's worth (`L * E`).
    pub capacity: Option<usize>,
    pub latency: LatencyOverrides,
    /// Overrides the calibrated hit probability of the single-GPU
    /// strategies; `MigSplit` instances use half of it.
    pub hit_prob: Option<f64>,
    pub calibration_targets: QosTargets,
    pub workload: WorkloadConfig,
    pub strategies: Vec<StrategyKind>,
    /// `profile` (full-scale cost model) or `functional` (toy engine traces).
    pub service: ServiceMode,
    pub sweep: SweepConfig,
    pub compare: CompareConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            seed: 0,
            n_variants: 2,
            variant_seeds: None,
            eps_expert: 0.05,
            eps_nonexpert: 0.05,
            capacity: None,
            latency: LatencyOverrides::default(),
            hit_prob: None,
            calibration_targets: SINGLE_TARGETS,
            workload: WorkloadConfig::default(),
            strategies: StrategyKind::ALL.to_vec(),
            service: ServiceMode::Profile,
            sweep: SweepConfig::default(),
            compare: CompareConfig::default(),
            output_dir: None,
        }
    }
}

/// Replaces individual latency parameters after calibration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyOverrides {
    pub attention_ms: Option<f64>,
    pub expert_compute_hit_ms: Option<f64>,
    pub fetch_per_expert_ms: Option<f64>,
    pub nonexpert_swap_ms: Option<f64>,
    pub full_model_swap_ms: Option<f64>,
    pub prefill_factor: Option<f64>,
}

impl LatencyOverrides {
    pub fn apply(&self, p: &mut LatencyParams) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.attention_ms, self.attention_ms);
        set(&mut p.expert_compute_hit_ms, self.expert_compute_hit_ms);
        set(&mut p.fetch_per_expert_ms, self.fetch_per_expert_ms);
        set(&mut p.nonexpert_swap_ms, self.nonexpert_swap_ms);
        set(&mut p.full_model_swap_ms, self.full_model_swap_ms);
        set(&mut p.prefill_factor, self.prefill_factor);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Used in profile mode; functional mode serves the generated variants.
    pub model_ids: Vec<ModelId>,
    pub rates_per_s: Vec<f64>,
    pub prompt_len: usize,
    pub output_tokens: usize,
    pub duration_s: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            model_ids: vec![ModelId::from("base"), ModelId::from("instruct")],
            rates_per_s: vec![0.03, 0.03],
            prompt_len: 20,
            output_tokens: 25,
            duration_s: 3600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceMode {
    Profile,
    Functional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Requests per second per model stream.
    pub lambdas: Vec<f64>,
    /// Defaults to `seed + 1 ..= seed + 5`.
    pub seeds: Option<Vec<u64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: (1..=9).map(|i| i as f64 / 100.0).collect(),
            seeds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub variant_counts: Vec<usize>,
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub max_new_tokens: usize,
    /// Independent base models averaged over when no store is given.
    pub n_bases: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let d = moeshare::quality::CompareSpec::default();
        Self {
            variant_counts: d.variant_counts,
            n_prompts: d.n_prompts,
            prompt_len: d.prompt_len,
            max_new_tokens: d.max_new_tokens,
            n_bases: d.n_bases,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.eps_expert >= 0.0 && self.eps_nonexpert >= 0.0) {
            return bad("eps values must be non-negative".into());
        }
        if let Some(seeds) = &self.variant_seeds {
            if seeds.len() != self.n_variants {
                return bad(format!("{} variant seeds for {} variants", seeds.len(), self.n_variants));
            }
        }
        if let Some(c) = self.capacity {
            if c > self.model.n_locations() {
                return bad(format!("capacity {c} exceeds {} expert locations", self.model.n_locations()));
            }
        }
        if let Some(h) = self.hit_prob {
            if !(0.0..=1.0).contains(&h) {
                return bad(format!("hit_prob {h} outside [0, 1]"));
            }
        }
        if self.strategies.is_empty() {
            return bad("no strategies selected".into());
        }
        self.workload_spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sweep.lambdas.is_empty() || self.sweep.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("sweep lambdas must be a non-empty list of rates >= 0".into());
        }
        if self.sweep_seeds().is_empty() {
            return bad("sweep needs at least one seed".into());
        }
        let mut probe = default_params(ParamsVariant::Proposed);
        self.latency.apply(&mut probe);
        probe.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn variant_seeds(&self) -> Vec<u64> {
        self.variant_seeds
            .clone()
            .unwrap_or_else(|| (1..=self.n_variants as u64).map(|i| self.seed + i).collect())
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        self.sweep
            .seeds
            .clone()
            .unwrap_or_else(|| (1..=5).map(|i| self.seed + i).collect())
    }

    pub fn capacity(&self) -> usize {
        self.capacity.unwrap_or(self.model.n_locations())
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            model_ids: self.workload.model_ids.clone(),
            rates_per_s: self.workload.rates_per_s.clone(),
            prompt_len: self.workload.prompt_len,
            output_tokens: self.workload.output_tokens,
            duration_s: self.workload.duration_s,
            seed: self.seed,
        }
    }

    /// Calibrated strategy with this config's overrides applied.
    pub fn strategy(&self, kind: StrategyKind) -> Result<Strategy, CliError> {
        let cal = calibrate(
            self.calibration_targets,
            &default_params(ParamsVariant::Proposed),
            32,
            2,
            self.workload.prompt_len,
            self.workload.output_tokens,
        )?;
        let mut s = Strategy::calibrated(kind, &cal);
        if let Some(h) = self.hit_prob {
            s.hit_prob = if kind == StrategyKind::MigSplit { h / 2.0 } else { h };
        }
        self.latency.apply(&mut s.params);
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse(r#"{"sede": 1}"#), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse(r#"{"sweep": {"lambda": [0.1]}}"#), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse(r#"{"latency": {"fetch": 1.0}}"#), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"capacity": 33}"#,
            r#"{"hit_prob": 1.5}"#,
            r#"{"strategies": []}"#,
            r#"{"workload": {"rates_per_s": [0.1]}}"#,
            r#"{"n_variants": 2, "variant_seeds": [4]}"#,
            r#"{"model": {"d_model": 0, "kv_dim": 32, "d_ff": 64, "n_layers": 4, "n_experts": 8, "top_k": 2, "vocab": 512, "max_seq": 128}}"#,
            r#"{"latency": {"fetch_per_expert_ms": -1}}"#,
            r#"{"sweep": {"lambdas": []}}"#,
        ] {
            assert!(matches!(RunConfig::parse(doc), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn derived_defaults() {
        let c = RunConfig::parse(r#"{"seed": 10, "n_variants": 3}"#).unwrap();
        assert_eq!(c.variant_seeds(), vec![11, 12, 13]);
        assert_eq!(c.sweep_seeds(), vec![11, 12, 13, 14, 15]);
        assert_eq!(c.capacity(), 32);
        assert_eq!(c.workload_spec().seed, 10);
    }

    #[test]
    fn overrides_apply_after_calibration() {
        let c = RunConfig::parse(r#"{"hit_prob": 0.5, "latency": {"nonexpert_swap_ms": 10}}"#).unwrap();
        let p = c.strategy(StrategyKind::Proposed).unwrap();
        assert_eq!(p.hit_prob, 0.5);
        assert_eq!(p.params.nonexpert_swap_ms, 10.0);
        assert_eq!(c.strategy(StrategyKind::MigSplit).unwrap().hit_prob, 0.25);
        let d = RunConfig::default().strategy(StrategyKind::Proposed).unwrap();
        assert!((d.hit_prob - 0.86).abs() < 0.01);
    }
}
