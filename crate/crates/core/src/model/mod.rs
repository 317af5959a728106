//! Toy sparse-MoE transformer parameters, synthetic fine-tuned variants and
//! parameter accounting.
//!
//! Weights are split the same way the serving system splits them: the
//! [`NonExpertWeights`] (embedding, attention, routers, norms, LM head) are
//! swapped per request, while [`ExpertWeights`] are consolidated across
//! models.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub String);

impl ModelId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModelId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Architecture hyper-parameters shared by every served model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Key/value projection width. Queries are split into
    /// `d_model / kv_dim` groups that share the single key/value head.
    pub kv_dim: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default used by tests and the CLI.
    pub const fn toy() -> Self {
        Self {
            d_model: 32,
            kv_dim: 32,
            d_ff: 64,
            n_layers: 4,
            n_experts: 8,
            top_k: 2,
            vocab: 512,
            max_seq: 128,
        }
    }

    /// Mixtral-8x7B dimensions, used only for parameter accounting.
    pub const fn mixtral_8x7b() -> Self {
        Self {
            d_model: 4096,
            kv_dim: 1024,
            d_ff: 14336,
            n_layers: 32,
            n_experts: 8,
            top_k: 2,
            vocab: 32000,
            max_seq: 32768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("kv_dim", self.kv_dim),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.top_k > self.n_experts {
            return Err(Error::InvalidConfig(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        if self.kv_dim > self.d_model || self.d_model % self.kv_dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "kv_dim {} must divide d_model {}",
                self.kv_dim, self.d_model
            )));
        }
        Ok(())
    }

    pub fn n_locations(&self) -> usize {
        self.n_layers * self.n_experts
    }
}

/// Parameters in one gated-FFN expert: `3 * d_model * d_ff`.
pub fn expert_param_count(config: &ModelConfig) -> u64 {
    3 * config.d_model as u64 * config.d_ff as u64
}

/// Embedding + LM head + per-layer attention, router and norms + final norm.
pub fn nonexpert_param_count(config: &ModelConfig) -> u64 {
    let d = config.d_model as u64;
    let kv = config.kv_dim as u64;
    let v = config.vocab as u64;
    let e = config.n_experts as u64;
    let per_layer = 2 * d * d + 2 * kv * d + e * d + 2 * d;
    2 * v * d + config.n_layers as u64 * per_layer + d
}

/// Non-expert parameters relative to the expert parameters active for one
/// token (`L * k` experts).
pub fn active_nonexpert_ratio(config: &ModelConfig) -> f64 {
    let active = config.n_layers as u64 * config.top_k as u64 * expert_param_count(config);
    nonexpert_param_count(config) as f64 / active as f64
}

/// Gated feed-forward expert: `down · (silu(gate_proj · x) ⊙ (up · x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub gate_proj: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

impl ExpertWeights {
    fn zeros(c: &ModelConfig) -> Self {
        Self {
            gate_proj: Tensor::zeros(&[c.d_ff, c.d_model]),
            up: Tensor::zeros(&[c.d_ff, c.d_model]),
            down: Tensor::zeros(&[c.d_model, c.d_ff]),
        }
    }

    /// The three matrices in flattening order.
    pub fn parts(&self) -> [&Tensor; 3] {
        [&self.gate_proj, &self.up, &self.down]
    }

    fn parts_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.gate_proj, &mut self.up, &mut self.down]
    }

    pub fn param_count(&self) -> usize {
        self.parts().iter().map(|t| t.numel()).sum()
    }
}

/// Non-expert weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm_attn: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm_moe: Tensor,
    pub router: Tensor,
}

impl LayerWeights {
    fn zeros(c: &ModelConfig) -> Self {
        Self {
            norm_attn: Tensor::zeros(&[c.d_model]),
            wq: Tensor::zeros(&[c.d_model, c.d_model]),
            wk: Tensor::zeros(&[c.kv_dim, c.d_model]),
            wv: Tensor::zeros(&[c.kv_dim, c.d_model]),
            wo: Tensor::zeros(&[c.d_model, c.d_model]),
            norm_moe: Tensor::zeros(&[c.d_model]),
            router: Tensor::zeros(&[c.n_experts, c.d_model]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("norm_attn", &self.norm_attn),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("norm_moe", &self.norm_moe),
            ("router", &self.router),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("norm_attn", &mut self.norm_attn),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("norm_moe", &mut self.norm_moe),
            ("router", &mut self.router),
        ]
    }
}

/// Everything that is not an expert. This is the set swapped on a
/// reconfiguration.
#[derive(Debug, Clone, PartialEq)]
pub struct NonExpertWeights {
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorGroup {
    Expert { layer: usize, expert: usize },
    NonExpert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub id: ModelId,
    pub config: ModelConfig,
    pub nonexpert: NonExpertWeights,
    /// `experts[layer][expert]`.
    pub experts: Vec<Vec<ExpertWeights>>,
}

impl ModelWeights {
    /// All-zero model with the right shapes.
    pub fn zeros(id: ModelId, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            id,
            config,
            nonexpert: NonExpertWeights {
                embedding: Tensor::zeros(&[c.vocab, c.d_model]),
                layers: (0..c.n_layers).map(|_| LayerWeights::zeros(c)).collect(),
                final_norm: Tensor::zeros(&[c.d_model]),
                lm_head: Tensor::zeros(&[c.vocab, c.d_model]),
            },
            experts: (0..c.n_layers)
                .map(|_| (0..c.n_experts).map(|_| ExpertWeights::zeros(c)).collect())
                .collect(),
        })
    }

    /// Tensors in checkpoint manifest order: embedding, then per layer
    /// `norm_attn, wq, wk, wv, wo, norm_moe, router` followed by each
    /// expert's `gate_proj, up, down`, then `final_norm, lm_head`.
    pub fn tensors(&self) -> Vec<(String, TensorGroup, &Tensor)> {
        let ne = &self.nonexpert;
        let mut out = vec![("embedding".to_owned(), TensorGroup::NonExpert, &ne.embedding)];
        for (l, (layer, experts)) in ne.layers.iter().zip(&self.experts).enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{l}.{name}"), TensorGroup::NonExpert, t));
            }
            for (e, expert) in experts.iter().enumerate() {
                let group = TensorGroup::Expert { layer: l, expert: e };
                for (name, t) in ["gate_proj", "up", "down"].into_iter().zip(expert.parts()) {
                    out.push((format!("layers.{l}.experts.{e}.{name}"), group, t));
                }
            }
        }
        out.push(("final_norm".to_owned(), TensorGroup::NonExpert, &ne.final_norm));
        out.push(("lm_head".to_owned(), TensorGroup::NonExpert, &ne.lm_head));
        out
    }

    /// Mutable counterpart of [`ModelWeights::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(TensorGroup, &mut Tensor)> {
        let ne = &mut self.nonexpert;
        let mut out = vec![(TensorGroup::NonExpert, &mut ne.embedding)];
        for (l, (layer, experts)) in ne.layers.iter_mut().zip(&mut self.experts).enumerate() {
            for (_, t) in layer.named_mut() {
                out.push((TensorGroup::NonExpert, t));
            }
            for (e, expert) in experts.iter_mut().enumerate() {
                for t in expert.parts_mut() {
                    out.push((TensorGroup::Expert { layer: l, expert: e }, t));
                }
            }
        }
        out.push((TensorGroup::NonExpert, &mut ne.final_norm));
        out.push((TensorGroup::NonExpert, &mut ne.lm_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn expert(&self, layer: usize, expert: usize) -> &ExpertWeights {
        &self.experts[layer][expert]
    }

    /// True when both models have identical tensor names and shapes.
    pub fn same_shape(&self, other: &ModelWeights) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.0 == y.0 && x.2.shape() == y.2.shape())
    }

    /// Order-sensitive FNV-1a digest of every weight's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, t) in self.tensors() {
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Synthetic pretrained base: every weight i.i.d. `normal(0, 1/sqrt(d_model))`,
/// drawn in manifest order from one stream seeded by `seed`.
pub fn init_base(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    let mut model = ModelWeights::zeros(ModelId(format!("base-{seed}")), config)?;
    let std = 1.0 / (config.d_model as f64).sqrt();
    let mut rng = SeededRng::new(seed);
    for (_, t) in model.tensors_mut() {
        t.add_noise(std, &mut rng);
    }
    Ok(model)
}

/// Per-element noise std applied to experts of `layer` (0-based): grows
/// linearly with depth.
pub fn expert_noise_std(eps_expert: f64, layer: usize, n_layers: usize) -> f64 {
    eps_expert * (1 + layer) as f64 / n_layers as f64
}

/// Synthetic fine-tune of `base`. Expert weights at layer `l` get
/// `normal(0, eps_expert * (1 + l) / L)` noise, everything else
/// `normal(0, eps_nonexpert)`. Noise is drawn in manifest order.
pub fn derive_variant(
    base: &ModelWeights,
    variant_seed: u64,
    eps_expert: f64,
    eps_nonexpert: f64,
) -> Result<ModelWeights> {
    if !(eps_expert >= 0.0 && eps_nonexpert >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise scales must be non-negative, got {eps_expert} and {eps_nonexpert}"
        )));
    }
    let mut variant = base.clone();
    variant.id = ModelId(format!("{}-v{variant_seed}", base.id));
    let n_layers = base.config.n_layers;
    let mut rng = SeededRng::new(variant_seed);
    for (group, t) in variant.tensors_mut() {
        let std = match group {
            TensorGroup::Expert { layer, .. } => expert_noise_std(eps_expert, layer, n_layers),
            TensorGroup::NonExpert => eps_nonexpert,
        };
        t.add_noise(std, &mut rng);
    }
    Ok(variant)
}

/// Host-memory model store. Every model must share one architecture.
#[derive(Debug, Clone, Default)]
pub struct HostStore {
    models: BTreeMap<ModelId, ModelWeights>,
}

impl HostStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_models(models: impl IntoIterator<Item = ModelWeights>) -> Result<Self> {
        let mut store = Self::new();
        for m in models {
            store.insert(m)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, model: ModelWeights) -> Result<()> {
        if let Some(existing) = self.models.values().next() {
            if existing.config != model.config {
                return Err(Error::ConfigMismatch(format!(
                    "model {} does not share the store's architecture",
                    model.id
                )));
            }
        }
        self.models.insert(model.id.clone(), model);
        Ok(())
    }

    pub fn get(&self, id: &ModelId) -> Result<&ModelWeights> {
        self.models
            .get(id)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    pub fn config(&self) -> Option<ModelConfig> {
        self.models.values().next().map(|m| m.config)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ModelId> {
        self.models.keys()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Errors unless all models share a config; returns it.
pub(crate) fn common_config(models: &[&ModelWeights]) -> Result<ModelConfig> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models supplied".into()))?;
    for m in &models[1..] {
        if m.config != first.config {
            return Err(Error::ConfigMismatch(format!(
                "{} and {} have different architectures",
                first.id, m.id
            )));
        }
    }
    Ok(first.config)
}
