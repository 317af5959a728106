//! Serving on a consolidated device image.
//!
//! A [`DeviceState`] holds the experts chosen by the expert map plus the
//! non-expert weights of exactly one model. Serving a request for a different
//! model swaps only the non-expert weights. During the forward pass a selected
//! expert whose slot is resident is used as-is, even when another model owns
//! it (a hit). Otherwise the requested model's own expert is read from the
//! host store for that one use (a miss). Misses never modify the map.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::consolidate::{ExpertMap, Location};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::model::{ExpertWeights, HostStore, ModelConfig, ModelId, ModelWeights, NonExpertWeights};
use crate::tensor::{argmax, matvec, rms_norm, silu, softmax, top_k, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub swaps: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestSpec {
    pub target: ModelId,
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    pub eos_token: u32,
}

impl RequestSpec {
    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        if let Some(t) = self.prompt.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// One gate selection within one layer for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub expert: usize,
    pub weight: f32,
    pub hit: bool,
    /// Model whose weights were used.
    pub owner: ModelId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub phase: Phase,
    pub position: usize,
    pub token: u32,
    /// `layers[l]` holds the `k` selections of layer `l`.
    pub layers: Vec<Vec<Selection>>,
}

impl TokenRecord {
    pub fn misses_in_layer(&self, layer: usize) -> usize {
        self.layers[layer].iter().filter(|s| !s.hit).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RequestTrace {
    pub target: Option<ModelId>,
    pub reconfigured: bool,
    pub tokens: Vec<TokenRecord>,
    pub hits: u64,
    pub misses: u64,
}

impl RequestTrace {
    pub fn prefill(&self) -> impl Iterator<Item = &TokenRecord> {
        self.tokens.iter().filter(|t| t.phase == Phase::Prefill)
    }

    pub fn decode(&self) -> impl Iterator<Item = &TokenRecord> {
        self.tokens.iter().filter(|t| t.phase == Phase::Decode)
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Eos,
    Length,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    /// Distribution each generated token was chosen from.
    pub logits: Option<Vec<Tensor>>,
    pub finish: FinishReason,
}

/// Per-layer key/value history for one sequence.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// What the forward pass used for one expert selection.
#[derive(Debug)]
pub struct ExpertUse<'a> {
    pub location: Location,
    pub hit: bool,
    pub owner: &'a ModelId,
    pub weights: &'a ExpertWeights,
}

/// Renormalised top-k gate: softmax over all logits, keep the `k` largest,
/// rescale them to sum to one.
pub fn gate_select(router_logits: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    let probs = softmax(router_logits)?;
    let chosen = top_k(&probs, k)?;
    let total: f64 = chosen.iter().map(|(_, p)| f64::from(*p)).sum();
    Ok(chosen
        .into_iter()
        .map(|(i, p)| (i, (f64::from(p) / total) as f32))
        .collect())
}

fn expert_forward(w: &ExpertWeights, x: &[f32]) -> Result<Vec<f32>> {
    let gate = silu(&matvec(&w.gate_proj, x)?);
    let up = matvec(&w.up, x)?;
    let hidden: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| g * u).collect();
    matvec(&w.down, &hidden)
}

/// Causal attention with `d_model / kv_dim` query groups sharing one
/// key/value head.
fn attention(cfg: &ModelConfig, q: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>]) -> Vec<f32> {
    let kv = cfg.kv_dim;
    let scale = 1.0 / (kv as f64).sqrt();
    let mut out = vec![0.0f32; cfg.d_model];
    for (qg, og) in q.chunks_exact(kv).zip(out.chunks_exact_mut(kv)) {
        let scores: Vec<f32> = keys
            .iter()
            .map(|k| {
                let mut acc = 0.0f64;
                for (a, b) in qg.iter().zip(k) {
                    acc += f64::from(*a) * f64::from(*b);
                }
                (acc * scale) as f32
            })
            .collect();
        let probs = softmax(&scores).expect("at least the current position");
        for (j, o) in og.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (p, v) in probs.iter().zip(values) {
                acc += f64::from(*p) * f64::from(v[j]);
            }
            *o = acc as f32;
        }
    }
    out
}

/// One token through the whole stack. `expert_for(layer, expert, gate_weight)`
/// supplies the weights for each gate selection, in selection order.
fn forward_step<'w>(
    cfg: &ModelConfig,
    ne: &NonExpertWeights,
    cache: &mut KvCache,
    token: u32,
    mut expert_for: impl FnMut(usize, usize, f32) -> Result<&'w ExpertWeights>,
) -> Result<Vec<f32>> {
    if cache.len >= cfg.max_seq {
        return Err(Error::ContextOverflow {
            position: cache.len,
            max_seq: cfg.max_seq,
        });
    }
    if token as usize >= cfg.vocab {
        return Err(Error::InvalidArgument(format!("token {token} outside vocabulary")));
    }
    let mut x = ne.embedding.row(token as usize).to_vec();
    for (l, layer) in ne.layers.iter().enumerate() {
        let h = rms_norm(&x, layer.norm_attn.data(), NORM_EPS)?;
        let q = matvec(&layer.wq, &h)?;
        cache.keys[l].push(matvec(&layer.wk, &h)?);
        cache.values[l].push(matvec(&layer.wv, &h)?);
        let attn = attention(cfg, &q, &cache.keys[l], &cache.values[l]);
        let attn = matvec(&layer.wo, &attn)?;
        for (xi, a) in x.iter_mut().zip(&attn) {
            *xi += a;
        }

        let h = rms_norm(&x, layer.norm_moe.data(), NORM_EPS)?;
        let router_logits = matvec(&layer.router, &h)?;
        let mut moe = vec![0.0f32; cfg.d_model];
        for (e, w) in gate_select(&router_logits, cfg.top_k)? {
            let y = expert_forward(expert_for(l, e, w)?, &h)?;
            for (m, yi) in moe.iter_mut().zip(&y) {
                *m += w * yi;
            }
        }
        for (xi, m) in x.iter_mut().zip(&moe) {
            *xi += m;
        }
    }
    cache.len += 1;
    let h = rms_norm(&x, ne.final_norm.data(), NORM_EPS)?;
    matvec(&ne.lm_head, &h)
}

/// Prefill token by token, then greedy decode. Every generated token is fed
/// back through the stack, so a request touches `prompt + generated`
/// positions.
fn run_generation(
    cfg: &ModelConfig,
    request: &RequestSpec,
    mut step: impl FnMut(&mut KvCache, u32, Phase) -> Result<Vec<f32>>,
) -> Result<GenerationResult> {
    request.validate(cfg)?;
    let mut cache = KvCache::new(cfg);
    let mut logits = Vec::new();
    for &t in &request.prompt {
        logits = step(&mut cache, t, Phase::Prefill)?;
    }
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    loop {
        let next = argmax(&logits) as u32;
        tokens.push(next);
        steps.push(Tensor::vector(std::mem::take(&mut logits)));
        logits = step(&mut cache, next, Phase::Decode)?;
        if next == request.eos_token {
            return Ok(GenerationResult {
                tokens,
                logits: Some(steps),
                finish: FinishReason::Eos,
            });
        }
        if tokens.len() == request.max_new_tokens {
            return Ok(GenerationResult {
                tokens,
                logits: Some(steps),
                finish: FinishReason::Length,
            });
        }
    }
}

/// Reference path: one model, every expert its own, no hit/miss machinery.
pub fn dedicated_forward(model: &ModelWeights, request: &RequestSpec) -> Result<GenerationResult> {
    run_generation(&model.config, request, |cache, token, _| {
        forward_step(&model.config, &model.nonexpert, cache, token, |l, e, _| {
            Ok(model.expert(l, e))
        })
    })
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    config: ModelConfig,
    map: ExpertMap,
    resident: BTreeMap<Location, ExpertWeights>,
    loaded_model: ModelId,
    nonexpert: NonExpertWeights,
    counters: Counters,
}

/// Loads the mapped experts and the first model's non-expert weights.
pub fn build_device(map: ExpertMap, store: &HostStore) -> Result<DeviceState> {
    let first = map
        .model_ids()
        .first()
        .ok_or_else(|| Error::InvalidArgument("expert map lists no models".into()))?
        .clone();
    for id in map.model_ids() {
        store.get(id)?;
    }
    let config = store.get(&first)?.config;
    let mut resident = BTreeMap::new();
    for (loc, owner) in map.slots() {
        if loc.layer >= config.n_layers || loc.expert >= config.n_experts {
            return Err(Error::ConfigMismatch(format!(
                "slot ({}, {}) outside a {}x{} model",
                loc.layer, loc.expert, config.n_layers, config.n_experts
            )));
        }
        resident.insert(loc, store.get(owner)?.expert(loc.layer, loc.expert).clone());
    }
    let nonexpert = store.get(&first)?.nonexpert.clone();
    Ok(DeviceState {
        config,
        map,
        resident,
        loaded_model: first,
        nonexpert,
        counters: Counters::default(),
    })
}

impl DeviceState {
    pub fn map(&self) -> &ExpertMap {
        &self.map
    }

    pub fn loaded_model(&self) -> &ModelId {
        &self.loaded_model
    }

    pub fn nonexpert(&self) -> &NonExpertWeights {
        &self.nonexpert
    }

    pub fn resident(&self) -> &BTreeMap<Location, ExpertWeights> {
        &self.resident
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Swaps in `target`'s non-expert weights if another model is loaded.
    /// Returns whether a swap happened. Resident experts are never touched.
    pub fn reconfigure(&mut self, store: &HostStore, target: &ModelId) -> Result<bool> {
        if !self.map.model_ids().contains(target) {
            return Err(Error::UnknownModel(target.to_string()));
        }
        if *target == self.loaded_model {
            return Ok(false);
        }
        self.nonexpert = store.get(target)?.nonexpert.clone();
        self.loaded_model = target.clone();
        self.counters.swaps += 1;
        Ok(true)
    }

    /// One position through the device. Appends a [`TokenRecord`] to `trace`.
    pub fn forward_token(
        &mut self,
        store: &HostStore,
        target: &ModelId,
        cache: &mut KvCache,
        token: u32,
        phase: Phase,
        trace: &mut RequestTrace,
    ) -> Result<Tensor> {
        self.forward_token_observed(store, target, cache, token, phase, trace, &mut |_| {})
    }

    /// [`DeviceState::forward_token`] with a callback that sees the exact
    /// weights used for every expert selection.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_token_observed(
        &mut self,
        store: &HostStore,
        target: &ModelId,
        cache: &mut KvCache,
        token: u32,
        phase: Phase,
        trace: &mut RequestTrace,
        observer: &mut dyn FnMut(&ExpertUse<'_>),
    ) -> Result<Tensor> {
        if *target != self.loaded_model {
            return Err(Error::InvalidArgument(format!(
                "device holds {} non-experts, request targets {target}",
                self.loaded_model
            )));
        }
        let target_model = store.get(target)?;
        let mut layers: Vec<Vec<Selection>> = vec![Vec::new(); self.config.n_layers];
        let (resident, map) = (&self.resident, &self.map);
        let logits = forward_step(&self.config, &self.nonexpert, cache, token, |l, e, weight| {
            let location = Location::new(l, e);
            let (weights, hit, owner) = match resident.get(&location) {
                Some(w) => (w, true, map.owner(location).expect("resident slot has an owner")),
                None => (target_model.expert(l, e), false, target),
            };
            observer(&ExpertUse { location, hit, owner, weights });
            layers[l].push(Selection {
                expert: e,
                weight,
                hit,
                owner: owner.clone(),
            });
            Ok(weights)
        })?;
        let (hits, misses) = layers.iter().flatten().fold((0, 0), |(h, m), s| {
            if s.hit {
                (h + 1, m)
            } else {
                (h, m + 1)
            }
        });
        self.counters.hits += hits;
        self.counters.misses += misses;
        trace.hits += hits;
        trace.misses += misses;
        trace.tokens.push(TokenRecord {
            phase,
            position: cache.len - 1,
            token,
            layers,
        });
        Ok(Tensor::vector(logits))
    }

    /// Reconfigures for the request's model, then prefills and greedily
    /// decodes.
    pub fn generate(
        &mut self,
        store: &HostStore,
        request: &RequestSpec,
    ) -> Result<(GenerationResult, RequestTrace)> {
        let mut trace = RequestTrace {
            target: Some(request.target.clone()),
            reconfigured: self.reconfigure(store, &request.target)?,
            ..RequestTrace::default()
        };
        let config = self.config;
        let result = run_generation(&config, request, |cache, token, phase| {
            Ok(self
                .forward_token(store, &request.target, cache, token, phase, &mut trace)?
                .into_data())
        })?;
        Ok((result, trace))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Divergence {
    pub token_match_rate: f64,
    pub mean_kl: f64,
}

fn log_softmax(v: &[f32]) -> Vec<f64> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = v.iter().map(|x| (*x as f64 - max).exp()).sum::<f64>().ln() + max;
    v.iter().map(|x| *x as f64 - lse).collect()
}

/// `KL(softmax(p) || softmax(q))`.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// Token agreement and mean per-step KL over the common prefix of two
/// generations.
pub fn divergence(a: &GenerationResult, b: &GenerationResult) -> Result<Divergence> {
    let (la, lb) = match (&a.logits, &b.logits) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::MissingLogits),
    };
    let n = a.tokens.len().min(b.tokens.len()).min(la.len()).min(lb.len());
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    }
    let matches = (0..n).filter(|&i| a.tokens[i] == b.tokens[i]).count();
    let kl: f64 = (0..n).map(|i| kl_divergence(la[i].data(), lb[i].data())).sum();
    Ok(Divergence {
        token_match_rate: matches as f64 / n as f64,
        mean_kl: kl / n as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub request: usize,
    pub phase: Phase,
    pub position: usize,
    pub token: u32,
    pub layer: usize,
    /// Selected experts, `;`-separated, in gate order.
    pub experts: String,
    /// `1` for hit, `0` for miss, aligned with `experts`.
    pub hits: String,
    pub owners: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RequestSummary {
    pub request: usize,
    pub target: String,
    pub swaps: u64,
    pub hits: u64,
    pub misses: u64,
    pub tokens: usize,
    pub finish_reason: FinishReason,
}

pub fn trace_rows(request: usize, trace: &RequestTrace) -> Vec<TraceRow> {
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(";");
    trace
        .tokens
        .iter()
        .flat_map(|t| {
            t.layers.iter().enumerate().map(move |(l, sel)| TraceRow {
                request,
                phase: t.phase,
                position: t.position,
                token: t.token,
                layer: l,
                experts: join(&mut sel.iter().map(|s| s.expert.to_string())),
                hits: join(&mut sel.iter().map(|s| u8::from(s.hit).to_string())),
                owners: join(&mut sel.iter().map(|s| s.owner.to_string())),
            })
        })
        .collect()
}

pub fn request_summary(request: usize, result: &GenerationResult, trace: &RequestTrace) -> RequestSummary {
    RequestSummary {
        request,
        target: trace.target.as_ref().map(ToString::to_string).unwrap_or_default(),
        swaps: u64::from(trace.reconfigured),
        hits: trace.hits,
        misses: trace.misses,
        tokens: result.tokens.len(),
        finish_reason: result.finish,
    }
}

pub fn write_trace_csv<'a>(path: &Path, traces: impl IntoIterator<Item = &'a RequestTrace>) -> Result<()> {
    let rows: Vec<TraceRow> = traces
        .into_iter()
        .enumerate()
        .flat_map(|(i, t)| trace_rows(i, t))
        .collect();
    write_csv(path, rows)
}

pub fn write_summary_csv(path: &Path, summaries: &[RequestSummary]) -> Result<()> {
    write_csv(path, summaries)
}
