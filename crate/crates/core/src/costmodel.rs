//! Millisecond cost model for a layer sweep, built from measured per-layer
//! latencies on an A100: attention cost, expert-block cost when every
//! selected expert is resident, and a PCIe fetch charge per missing expert.
//!
//! Measured expert-block cells (ms, out of 2 selections resident):
//!
//! | variant  | attention | 0 hit | 1 hit | 2 hit |
//! |----------|-----------|-------|-------|-------|
//! | proposed | 0.72      | 56.8  | 29.2  | 1.2   |
//! | MIG      | 0.78      | 104.3 | 54.1  | 1.7   |
//!
//! The additive model `hit_cost + misses * fetch` reproduces the 0- and
//! 2-hit cells exactly. It gives 29.0 and 53.0 for the 1-hit cells.

use serde::{Deserialize, Serialize};

use crate::engine::RequestTrace;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Latency parameters, all in milliseconds except the dimensionless
/// `prefill_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyParams {
    pub attention_ms: f64,
    /// Expert block of one layer when all `k` selections hit.
    pub expert_compute_hit_ms: f64,
    pub fetch_per_expert_ms: f64,
    pub nonexpert_swap_ms: f64,
    pub full_model_swap_ms: f64,
    /// Multiplier on the per-token layer-sweep cost during prefill.
    pub prefill_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamsVariant {
    Proposed,
    MigInstance,
}

/// Full-model swap from host memory ("up to 2 minutes").
pub const FULL_MODEL_SWAP_MS: f64 = 120_000.0;
/// Measured non-expert swap.
pub const NONEXPERT_SWAP_MS: f64 = 1_200.0;

pub fn default_params(variant: ParamsVariant) -> LatencyParams {
    match variant {
        ParamsVariant::Proposed => LatencyParams {
            attention_ms: 0.72,
            expert_compute_hit_ms: 1.2,
            fetch_per_expert_ms: 27.8,
            nonexpert_swap_ms: NONEXPERT_SWAP_MS,
            full_model_swap_ms: FULL_MODEL_SWAP_MS,
            prefill_factor: 0.5,
        },
        ParamsVariant::MigInstance => LatencyParams {
            attention_ms: 0.78,
            expert_compute_hit_ms: 1.7,
            fetch_per_expert_ms: 51.3,
            nonexpert_swap_ms: NONEXPERT_SWAP_MS,
            full_model_swap_ms: FULL_MODEL_SWAP_MS,
            prefill_factor: 0.5,
        },
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.attention_ms,
            self.expert_compute_hit_ms,
            self.fetch_per_expert_ms,
            self.nonexpert_swap_ms,
            self.full_model_swap_ms,
            self.prefill_factor,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("latency parameters must be finite and >= 0: {self:?}")))
        }
    }

    /// Expert-block part of [`layer_latency`].
    pub fn expert_block_ms(&self, misses: usize) -> f64 {
        self.expert_compute_hit_ms + misses as f64 * self.fetch_per_expert_ms
    }
}

/// One layer for one token: attention plus the expert block with `misses`
/// of the `k` selections fetched from host memory.
pub fn layer_latency(params: &LatencyParams, misses: usize, k: usize) -> Result<f64> {
    if misses > k {
        return Err(Error::InvalidArgument(format!("{misses} misses out of {k} selections")));
    }
    Ok(params.attention_ms + params.expert_block_ms(misses))
}

/// Synthetic request: Bernoulli(`hit_prob`) hits per selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub n_layers: usize,
    pub top_k: usize,
    pub hit_prob: f64,
    pub prompt_len: usize,
    pub max_new_tokens: usize,
}

impl ProfileSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hit_prob) {
            return Err(Error::InvalidArgument(format!("hit_prob {} outside [0, 1]", self.hit_prob)));
        }
        if self.n_layers == 0 || self.top_k == 0 {
            return Err(Error::InvalidArgument("profile needs layers and selections".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RequestLatency {
    pub ttft_ms: f64,
    pub total_ms: f64,
}

impl RequestLatency {
    fn assemble(params: &LatencyParams, prefill_sweeps_ms: f64, decode_ms: f64, swap: bool) -> Self {
        let swap_ms = if swap { params.nonexpert_swap_ms } else { 0.0 };
        let ttft_ms = params.prefill_factor * prefill_sweeps_ms + swap_ms;
        Self {
            ttft_ms,
            total_ms: ttft_ms + decode_ms,
        }
    }

    /// Adds a fixed delay (for example a full model swap) before the first
    /// token.
    pub fn delayed(self, ms: f64) -> Self {
        Self {
            ttft_ms: self.ttft_ms + ms,
            total_ms: self.total_ms + ms,
        }
    }
}

fn sweep_ms(params: &LatencyParams, layers: impl Iterator<Item = usize>, k: usize) -> Result<f64> {
    layers.map(|m| layer_latency(params, m, k)).sum()
}

/// Latency of a request the functional engine actually served. `swap` adds
/// the non-expert swap to the time to first token.
pub fn request_latency_trace(trace: &RequestTrace, params: &LatencyParams, swap: bool) -> Result<RequestLatency> {
    let mut prefill = 0.0;
    let mut decode = 0.0;
    for tok in &trace.tokens {
        let k = tok.layers.first().map_or(0, Vec::len);
        let ms = sweep_ms(params, (0..tok.layers.len()).map(|l| tok.misses_in_layer(l)), k)?;
        match tok.phase {
            crate::engine::Phase::Prefill => prefill += ms,
            crate::engine::Phase::Decode => decode += ms,
        }
    }
    Ok(RequestLatency::assemble(params, prefill, decode, swap))
}

/// Latency of a synthetic request with per-selection Bernoulli hits drawn
/// from `rng`: prompt tokens first, then decode tokens, each layer drawing
/// its `k` selections in order.
pub fn request_latency_profile(
    profile: &ProfileSpec,
    params: &LatencyParams,
    swap: bool,
    rng: &mut SeededRng,
) -> Result<RequestLatency> {
    profile.validate()?;
    let token_ms = |rng: &mut SeededRng| -> Result<f64> {
        let misses = (0..profile.n_layers).map(|_| {
            (0..profile.top_k).filter(|_| !rng.bernoulli(profile.hit_prob)).count()
        });
        let misses: Vec<usize> = misses.collect();
        sweep_ms(params, misses.into_iter(), profile.top_k)
    };
    let mut prefill = 0.0;
    for _ in 0..profile.prompt_len {
        prefill += token_ms(rng)?;
    }
    let mut decode = 0.0;
    for _ in 0..profile.max_new_tokens {
        decode += token_ms(rng)?;
    }
    Ok(RequestLatency::assemble(params, prefill, decode, swap))
}

fn binomial(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Expected expert-block cost of one layer when each of `k` selections hits
/// independently with probability `hit_prob`. For `k = 2` this is
/// `h^2 c2 + 2h(1-h) c1 + (1-h)^2 c0`.
pub fn expected_expert_block_ms(params: &LatencyParams, hit_prob: f64, k: usize) -> f64 {
    let miss = 1.0 - hit_prob;
    (0..=k)
        .map(|m| {
            binomial(k, m) * miss.powi(m as i32) * hit_prob.powi((k - m) as i32) * params.expert_block_ms(m)
        })
        .sum()
}

/// Expected time of one decode token (all layers).
pub fn expected_token_ms(params: &LatencyParams, hit_prob: f64, n_layers: usize, k: usize) -> f64 {
    n_layers as f64 * (params.attention_ms + expected_expert_block_ms(params, hit_prob, k))
}

/// Expected latency of a profiled request.
pub fn expected_request_latency(profile: &ProfileSpec, params: &LatencyParams, swap: bool) -> RequestLatency {
    let tok = expected_token_ms(params, profile.hit_prob, profile.n_layers, profile.top_k);
    RequestLatency::assemble(
        params,
        profile.prompt_len as f64 * tok,
        profile.max_new_tokens as f64 * tok,
        swap,
    )
}

/// Hit probability whose expected per-token decode time equals
/// `target_ms_per_token`, found by bisection on `[0, 1]`.
pub fn calibrate_hit_prob(target_ms_per_token: f64, params: &LatencyParams, n_layers: usize, k: usize) -> Result<f64> {
    let f = |h: f64| expected_token_ms(params, h, n_layers, k);
    let (lo_ms, hi_ms) = (f(1.0), f(0.0));
    if !(lo_ms..=hi_ms).contains(&target_ms_per_token) {
        return Err(Error::OutOfRange {
            target: target_ms_per_token,
            min: lo_ms,
            max: hi_ms,
        });
    }
    // Cost decreases in h.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target_ms_per_token {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Prefill factor that makes the expected time to first token equal
/// `target_ttft_ms` for a prompt of `prompt_len` tokens.
pub fn calibrate_prefill_factor(target_ttft_ms: f64, ms_per_token: f64, prompt_len: usize) -> Result<f64> {
    if prompt_len == 0 || ms_per_token <= 0.0 || target_ttft_ms < 0.0 {
        return Err(Error::InvalidArgument("prefill calibration needs a prompt and positive costs".into()));
    }
    Ok(target_ttft_ms / (prompt_len as f64 * ms_per_token))
}

/// Uniform-routing hit probability of a map holding `capacity` of the
/// `n_layers * n_experts` slots.
pub fn capacity_to_hit_prob(capacity: usize, n_layers: usize, n_experts: usize) -> Result<f64> {
    let slots = n_layers * n_experts;
    if slots == 0 || capacity > slots {
        return Err(Error::InvalidArgument(format!("capacity {capacity} outside [0, {slots}]")));
    }
    Ok(capacity as f64 / slots as f64)
}

/// Reference serving measurements (seconds) for the 20-token prompt,
/// 25-token output workload, used to calibrate the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosTargets {
    pub ttft_s: f64,
    pub turnaround_s: f64,
}

pub const SINGLE_TARGETS: QosTargets = QosTargets { ttft_s: 0.89, turnaround_s: 8.34 };
pub const PROPOSED_TARGETS: QosTargets = QosTargets { ttft_s: 1.41, turnaround_s: 8.78 };
pub const MIG_TARGETS: QosTargets = QosTargets { ttft_s: 5.86, turnaround_s: 49.67 };

/// Hit probability and prefill factor fitted to single-model measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Hit probability of the single-model and proposed device images.
    pub hit_prob: f64,
    pub prefill_factor: f64,
    /// Target decode cost per token the hit probability was solved for.
    pub decode_ms_per_token: f64,
}

/// Fits `(h, alpha)`: the decode rate is taken from the time between first
/// token and completion spread over the remaining `output_tokens - 1`
/// tokens, and `alpha` scales a prompt sweep at that rate to the measured
/// time to first token.
pub fn calibrate(
    targets: QosTargets,
    params: &LatencyParams,
    n_layers: usize,
    k: usize,
    prompt_len: usize,
    output_tokens: usize,
) -> Result<Calibration> {
    if output_tokens < 2 {
        return Err(Error::InvalidArgument("calibration needs at least 2 output tokens".into()));
    }
    let per_token = (targets.turnaround_s - targets.ttft_s) * 1000.0 / (output_tokens - 1) as f64;
    let hit_prob = calibrate_hit_prob(per_token, params, n_layers, k)?;
    let tok = expected_token_ms(params, hit_prob, n_layers, k);
    Ok(Calibration {
        hit_prob,
        prefill_factor: calibrate_prefill_factor(targets.ttft_s * 1000.0, tok, prompt_len)?,
        decode_ms_per_token: per_token,
    })
}
