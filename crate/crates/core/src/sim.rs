//! Discrete-event replay of Poisson request streams against one of four
//! serving strategies.
//!
//! Every strategy is non-preemptive FIFO with single-request batches:
//!
//! * `Proposed`: one server holding the consolidated image. A request for a
//!   model other than the one served last pays the non-expert swap before its
//!   first token.
//! * `SingleBaseline`: one server, one model, all streams merged, no swaps.
//! * `MigSplit`: one independent server and queue per model using the MIG
//!   latency row; metrics are summed over instances.
//! * `TimeSharing`: one server; a model change pays a full model swap.
//!
//! Requests still in service when the window closes count as in flight,
//! those still waiting as queued; neither contributes to the QoS means.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::{
    calibrate, default_params, request_latency_profile, request_latency_trace, Calibration, LatencyParams,
    ParamsVariant, ProfileSpec, RequestLatency, SINGLE_TARGETS,
};
use crate::consolidate::{build_expert_map, pairwise_distance_table, rank_locations, DistanceTable};
use crate::engine::{build_device, DeviceState, RequestSpec};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::model::{HostStore, ModelId, ModelWeights};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub model_ids: Vec<ModelId>,
    /// Arrival rate of each model's stream, requests per second.
    pub rates_per_s: Vec<f64>,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_output_tokens")]
    pub output_tokens: usize,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_prompt_len() -> usize {
    20
}

fn default_output_tokens() -> usize {
    25
}

fn default_duration() -> f64 {
    3600.0
}

impl WorkloadSpec {
    /// Two models with 20-token prompts, 25 output tokens and equal rates.
    pub fn two_models(rate_per_s: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            model_ids: vec![ModelId::from("base"), ModelId::from("instruct")],
            rates_per_s: vec![rate_per_s; 2],
            prompt_len: default_prompt_len(),
            output_tokens: default_output_tokens(),
            duration_s,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_ids.is_empty() || self.model_ids.len() != self.rates_per_s.len() {
            return Err(Error::InvalidConfig(format!(
                "{} model ids but {} rates",
                self.model_ids.len(),
                self.rates_per_s.len()
            )));
        }
        if self.rates_per_s.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidConfig("arrival rates must be finite and >= 0".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::InvalidConfig("duration must be positive".into()));
        }
        if self.prompt_len == 0 || self.output_tokens == 0 {
            return Err(Error::InvalidConfig("prompt and output lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn total_rate_per_s(&self) -> f64 {
        self.rates_per_s.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub id: usize,
    /// Index into `WorkloadSpec::model_ids`.
    pub model: usize,
    pub time_s: f64,
}

/// Merged, time-ordered arrivals. Model `i` draws exponential gaps from
/// stream `i` of the workload seed; equal timestamps order by model index.
pub fn gen_workload(spec: &WorkloadSpec) -> Result<Vec<Arrival>> {
    spec.validate()?;
    let mut all = Vec::new();
    for (model, &rate) in spec.rates_per_s.iter().enumerate() {
        if rate == 0.0 {
            continue;
        }
        let mut rng = SeededRng::with_stream(spec.seed, model as u64);
        let mut t = 0.0;
        loop {
            t += rng.exponential(rate);
            if t >= spec.duration_s {
                break;
            }
            all.push(Arrival { id: 0, model, time_s: t });
        }
    }
    all.sort_by(|a, b| a.time_s.total_cmp(&b.time_s).then(a.model.cmp(&b.model)));
    for (i, a) in all.iter_mut().enumerate() {
        a.id = i;
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Proposed,
    SingleBaseline,
    MigSplit,
    TimeSharing,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [Self::Proposed, Self::SingleBaseline, Self::MigSplit, Self::TimeSharing];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::SingleBaseline => "single_baseline",
            Self::MigSplit => "mig_split",
            Self::TimeSharing => "time_sharing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub params: LatencyParams,
    /// Per-selection hit probability used in profile mode.
    pub hit_prob: f64,
}

impl Strategy {
    /// Calibrated defaults: the proposed latency row for the single-GPU
    /// strategies, the MIG row with half the expert capacity (so half the
    /// hit probability) for `MigSplit`.
    pub fn calibrated(kind: StrategyKind, cal: &Calibration) -> Self {
        let (variant, hit_prob) = match kind {
            StrategyKind::MigSplit => (ParamsVariant::MigInstance, cal.hit_prob / 2.0),
            _ => (ParamsVariant::Proposed, cal.hit_prob),
        };
        let params = LatencyParams {
            prefill_factor: cal.prefill_factor,
            ..default_params(variant)
        };
        Self { kind, params, hit_prob }
    }

    /// [`Strategy::calibrated`] with the calibration fitted to the
    /// single-model measurements at Mixtral depth.
    pub fn calibrated_default(kind: StrategyKind) -> Result<Self> {
        Ok(Self::calibrated(kind, &default_calibration()?))
    }

    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(0.0..=1.0).contains(&self.hit_prob) {
            return Err(Error::InvalidConfig(format!("hit_prob {} outside [0, 1]", self.hit_prob)));
        }
        Ok(())
    }

    /// Per-model stream rates for a point `lambda` on the sweep axis. The
    /// single-GPU strategies receive one stream of rate `lambda` per model.
    /// `MigSplit` instances each receive `lambda / n_models`.
    pub fn rates_for(&self, lambda: f64, n_models: usize) -> Vec<f64> {
        match self.kind {
            StrategyKind::MigSplit => vec![lambda / n_models as f64; n_models],
            _ => vec![lambda; n_models],
        }
    }

    fn n_servers(&self, n_models: usize) -> usize {
        match self.kind {
            StrategyKind::MigSplit => n_models,
            _ => 1,
        }
    }
}

/// Calibration fitted to the single-model QoS measurements with the
/// proposed latency row, 32 layers, top-2, 20 prompt and 25 output tokens.
pub fn default_calibration() -> Result<Calibration> {
    calibrate(SINGLE_TARGETS, &default_params(ParamsVariant::Proposed), 32, 2, 20, 25)
}

/// Supplies the service time of a request, excluding any swap.
pub trait ServiceModel {
    fn service(&mut self, arrival: &Arrival, model: &ModelId, instance: usize, strategy: &Strategy)
        -> Result<RequestLatency>;
}

/// Full-scale service times: per-selection Bernoulli hits at the
/// strategy's hit probability.
#[derive(Debug, Clone)]
pub struct ProfileService {
    pub n_layers: usize,
    pub top_k: usize,
    pub prompt_len: usize,
    pub output_tokens: usize,
    rng: SeededRng,
}

impl ProfileService {
    /// Mixtral shape (32 layers, top-2) with the workload's request shape.
    /// Draws come from stream `u32::MAX + 1` of the workload seed, disjoint
    /// from the arrival streams.
    pub fn for_workload(spec: &WorkloadSpec) -> Self {
        Self {
            n_layers: 32,
            top_k: 2,
            prompt_len: spec.prompt_len,
            output_tokens: spec.output_tokens,
            rng: SeededRng::with_stream(spec.seed, 1 << 32),
        }
    }

    pub fn profile(&self, hit_prob: f64) -> ProfileSpec {
        ProfileSpec {
            n_layers: self.n_layers,
            top_k: self.top_k,
            hit_prob,
            prompt_len: self.prompt_len,
            max_new_tokens: self.output_tokens,
        }
    }
}

impl ServiceModel for ProfileService {
    fn service(&mut self, _: &Arrival, _: &ModelId, _: usize, strategy: &Strategy) -> Result<RequestLatency> {
        request_latency_profile(&self.profile(strategy.hit_prob), &strategy.params, false, &mut self.rng)
    }
}

/// Which device serves a request, and as which model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Routing {
    /// `devices[instance]`, serving the requested model.
    Instance,
    /// `devices[model index]`, serving the requested model.
    PerModel,
    /// `devices[0]`, always serving this model.
    Fixed(ModelId),
}

/// Toy-scale service times from the functional engine's real hit/miss
/// traces.
pub struct FunctionalService {
    pub devices: Vec<DeviceState>,
    pub store: HostStore,
    pub routing: Routing,
    pub prompt_len: usize,
    pub output_tokens: usize,
    rng: SeededRng,
}

impl FunctionalService {
    pub fn new(devices: Vec<DeviceState>, store: HostStore, routing: Routing, spec: &WorkloadSpec) -> Self {
        Self {
            devices,
            store,
            routing,
            prompt_len: spec.prompt_len,
            output_tokens: spec.output_tokens,
            rng: SeededRng::with_stream(spec.seed, 1 << 33),
        }
    }

    /// Devices for `kind` over `models`, which must be listed in the
    /// workload's model order:
    ///
    /// * `Proposed`: one device, `capacity` slots consolidated over all models.
    /// * `SingleBaseline`: one device holding `capacity` experts of the
    ///   first model, which serves every request.
    /// * `MigSplit`: one device per model with `capacity / n` of its own
    ///   experts.
    /// * `TimeSharing`: one device per model with `capacity` of its own
    ///   experts; a full swap makes it the active one.
    ///
    /// Slots fill in similarity order in every case.
    pub fn for_strategy(
        kind: StrategyKind,
        models: &[ModelWeights],
        capacity: usize,
        spec: &WorkloadSpec,
    ) -> Result<Self> {
        let ids: Vec<ModelId> = models.iter().map(|m| m.id.clone()).collect();
        if ids != spec.model_ids {
            return Err(Error::InvalidConfig("functional models must match the workload's model ids".into()));
        }
        let store = HostStore::from_models(models.iter().cloned())?;
        let refs: Vec<&ModelWeights> = models.iter().collect();
        let ranking = if refs.len() >= 2 {
            rank_locations(&pairwise_distance_table(&refs)?)
        } else {
            let cfg = models[0].config;
            rank_locations(&DistanceTable {
                values: vec![vec![0.0; cfg.n_experts]; cfg.n_layers],
                model_ids: ids.clone(),
            })
        };
        let device = |cap: usize, owners: &[ModelId]| build_device(build_expert_map(&ranking, cap, owners)?, &store);
        let (devices, routing) = match kind {
            StrategyKind::Proposed => (vec![device(capacity, &ids)?], Routing::Instance),
            StrategyKind::SingleBaseline => (vec![device(capacity, &ids[..1])?], Routing::Fixed(ids[0].clone())),
            StrategyKind::MigSplit => (
                ids.iter()
                    .map(|id| device(capacity / ids.len(), std::slice::from_ref(id)))
                    .collect::<Result<_>>()?,
                Routing::Instance,
            ),
            StrategyKind::TimeSharing => (
                ids.iter()
                    .map(|id| device(capacity, std::slice::from_ref(id)))
                    .collect::<Result<_>>()?,
                Routing::PerModel,
            ),
        };
        Ok(Self::new(devices, store, routing, spec))
    }
}

impl ServiceModel for FunctionalService {
    fn service(&mut self, arrival: &Arrival, model: &ModelId, instance: usize, strategy: &Strategy)
        -> Result<RequestLatency> {
        let (index, target) = match &self.routing {
            Routing::Instance => (instance, model.clone()),
            Routing::PerModel => (arrival.model, model.clone()),
            Routing::Fixed(id) => (0, id.clone()),
        };
        let device = self
            .devices
            .get_mut(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no device at index {index}")))?;
        let vocab = device.config().vocab;
        let request = RequestSpec {
            target,
            prompt: (0..self.prompt_len).map(|_| self.rng.below(vocab) as u32).collect(),
            max_new_tokens: self.output_tokens,
            eos_token: u32::MAX,
        };
        let (_, trace) = device.generate(&self.store, &request)?;
        request_latency_trace(&trace, &strategy.params, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    InFlight,
    Queued,
}

/// One row of the event log. Times in seconds from the start of the window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub id: usize,
    pub model: ModelId,
    pub instance: usize,
    pub arrival_s: f64,
    pub start_s: Option<f64>,
    pub first_token_s: Option<f64>,
    pub completion_s: Option<f64>,
    pub swap: bool,
    pub status: RequestStatus,
}

impl RequestRecord {
    pub fn ttft_s(&self) -> Option<f64> {
        self.first_token_s.map(|t| t - self.arrival_s)
    }

    pub fn turnaround_s(&self) -> Option<f64> {
        self.completion_s.map(|t| t - self.arrival_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelMetrics {
    pub model: ModelId,
    pub arrivals: usize,
    pub completed: usize,
    pub mean_ttft_s: Option<f64>,
    pub mean_turnaround_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub strategy: StrategyKind,
    pub duration_s: f64,
    pub arrivals: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub queued: usize,
    pub swaps: usize,
    /// Completed requests per minute.
    pub throughput_per_min: f64,
    /// Arrivals in the window per minute.
    pub offered_per_min: f64,
    /// Configured total arrival rate, requests per minute.
    pub nominal_per_min: f64,
    pub mean_ttft_s: Option<f64>,
    pub mean_turnaround_s: Option<f64>,
    pub max_queue_len: usize,
    pub per_model: Vec<ModelMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub log: Vec<RequestRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival(usize),
    Departure { server: usize, request: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time_s: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time_s.total_cmp(&self.time_s).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct Server {
    queue: VecDeque<usize>,
    busy: bool,
    /// Model whose weights are loaded (index into the workload's ids).
    loaded: usize,
}

struct Sim<'a, S: ServiceModel> {
    strategy: &'a Strategy,
    workload: &'a WorkloadSpec,
    source: &'a mut S,
    events: BinaryHeap<Event>,
    seq: u64,
    servers: Vec<Server>,
    log: Vec<RequestRecord>,
    max_queue_len: usize,
}

impl<S: ServiceModel> Sim<'_, S> {
    fn push(&mut self, time_s: f64, kind: EventKind) {
        self.events.push(Event { time_s, seq: self.seq, kind });
        self.seq += 1;
    }

    fn server_for(&self, model: usize) -> usize {
        match self.strategy.kind {
            StrategyKind::MigSplit => model,
            _ => 0,
        }
    }

    fn start_next(&mut self, server: usize, now: f64, arrivals: &[Arrival]) -> Result<()> {
        let Some(req) = self.servers[server].queue.pop_front() else {
            return Ok(());
        };
        let arrival = arrivals[req];
        let model_id = &self.workload.model_ids[arrival.model];
        let base = self.source.service(&arrival, model_id, server, self.strategy)?;
        let params = &self.strategy.params;
        let changed = self.servers[server].loaded != arrival.model;
        let (latency, swap) = match self.strategy.kind {
            StrategyKind::Proposed if changed => (base.delayed(params.nonexpert_swap_ms), true),
            StrategyKind::TimeSharing if changed => (base.delayed(params.full_model_swap_ms), true),
            _ => (base, false),
        };
        self.servers[server].loaded = arrival.model;
        self.servers[server].busy = true;
        let rec = &mut self.log[req];
        rec.start_s = Some(now);
        rec.first_token_s = Some(now + latency.ttft_ms / 1000.0);
        rec.completion_s = Some(now + latency.total_ms / 1000.0);
        rec.swap = swap;
        rec.status = RequestStatus::InFlight;
        let done = now + latency.total_ms / 1000.0;
        self.push(done, EventKind::Departure { server, request: req });
        Ok(())
    }

    fn run(mut self, arrivals: &[Arrival]) -> Result<(Vec<RequestRecord>, usize)> {
        for a in arrivals {
            self.push(a.time_s, EventKind::Arrival(a.id));
        }
        while let Some(ev) = self.events.pop() {
            if ev.time_s > self.workload.duration_s {
                break;
            }
            match ev.kind {
                EventKind::Arrival(req) => {
                    let server = self.server_for(arrivals[req].model);
                    self.servers[server].queue.push_back(req);
                    if self.servers[server].busy {
                        self.max_queue_len = self.max_queue_len.max(self.servers[server].queue.len());
                    } else {
                        self.start_next(server, ev.time_s, arrivals)?;
                    }
                }
                EventKind::Departure { server, request } => {
                    self.log[request].status = RequestStatus::Completed;
                    self.servers[server].busy = false;
                    self.start_next(server, ev.time_s, arrivals)?;
                }
            }
        }
        Ok((self.log, self.max_queue_len))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Replays `workload` under `strategy`, drawing service times from `source`.
pub fn run_sim<S: ServiceModel>(strategy: &Strategy, workload: &WorkloadSpec, source: &mut S) -> Result<SimOutput> {
    strategy.validate()?;
    let arrivals = gen_workload(workload)?;
    let n_models = workload.model_ids.len();
    let log = arrivals
        .iter()
        .map(|a| RequestRecord {
            id: a.id,
            model: workload.model_ids[a.model].clone(),
            instance: match strategy.kind {
                StrategyKind::MigSplit => a.model,
                _ => 0,
            },
            arrival_s: a.time_s,
            start_s: None,
            first_token_s: None,
            completion_s: None,
            swap: false,
            status: RequestStatus::Queued,
        })
        .collect();
    let sim = Sim {
        strategy,
        workload,
        source,
        events: BinaryHeap::new(),
        seq: 0,
        servers: (0..strategy.n_servers(n_models)).map(|_| Server::default()).collect(),
        log,
        max_queue_len: 0,
    };
    let (log, max_queue_len) = sim.run(&arrivals)?;
    Ok(SimOutput {
        report: summarize(strategy, workload, &log, max_queue_len),
        log,
    })
}

fn summarize(strategy: &Strategy, workload: &WorkloadSpec, log: &[RequestRecord], max_queue_len: usize) -> MetricsReport {
    let done = || log.iter().filter(|r| r.status == RequestStatus::Completed);
    let count = |s| log.iter().filter(|r| r.status == s).count();
    let completed = count(RequestStatus::Completed);
    let minutes = workload.duration_s / 60.0;
    let per_model = workload
        .model_ids
        .iter()
        .map(|m| {
            let mine = || done().filter(|r| &r.model == m);
            ModelMetrics {
                model: m.clone(),
                arrivals: log.iter().filter(|r| &r.model == m).count(),
                completed: mine().count(),
                mean_ttft_s: mean(mine().filter_map(RequestRecord::ttft_s)),
                mean_turnaround_s: mean(mine().filter_map(RequestRecord::turnaround_s)),
            }
        })
        .collect();
    MetricsReport {
        strategy: strategy.kind,
        duration_s: workload.duration_s,
        arrivals: log.len(),
        completed,
        in_flight: count(RequestStatus::InFlight),
        queued: count(RequestStatus::Queued),
        swaps: log.iter().filter(|r| r.swap).count(),
        throughput_per_min: completed as f64 / minutes,
        offered_per_min: log.len() as f64 / minutes,
        nominal_per_min: workload.total_rate_per_s() * 60.0,
        mean_ttft_s: mean(done().filter_map(RequestRecord::ttft_s)),
        mean_turnaround_s: mean(done().filter_map(RequestRecord::turnaround_s)),
        max_queue_len,
        per_model,
    }
}

/// Writes the per-request event log as CSV.
pub fn write_event_log(path: &Path, log: &[RequestRecord]) -> Result<()> {
    write_csv(path, log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub strategies: Vec<Strategy>,
    /// Sweep axis, requests per second; see [`Strategy::rates_for`].
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Supplies model ids, request shape and duration. Rates and seed are
    /// overwritten per point.
    pub base: WorkloadSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: StrategyKind,
    pub lambda: f64,
    /// `None` on mean rows.
    pub seed: Option<u64>,
    pub nominal_per_min: f64,
    pub offered_per_min: f64,
    pub throughput_per_min: f64,
    pub mean_ttft_s: Option<f64>,
    pub mean_turnaround_s: Option<f64>,
    pub completed: f64,
}

impl SweepRow {
    pub fn is_mean(&self) -> bool {
        self.seed.is_none()
    }
}

fn run_point(strategy: &Strategy, base: &WorkloadSpec, lambda: f64, seed: u64) -> Result<SweepRow> {
    let workload = WorkloadSpec {
        rates_per_s: strategy.rates_for(lambda, base.model_ids.len()),
        seed,
        ..base.clone()
    };
    let mut source = ProfileService::for_workload(&workload);
    let r = run_sim(strategy, &workload, &mut source)?.report;
    Ok(SweepRow {
        strategy: strategy.kind,
        lambda,
        seed: Some(seed),
        nominal_per_min: r.nominal_per_min,
        offered_per_min: r.offered_per_min,
        throughput_per_min: r.throughput_per_min,
        mean_ttft_s: r.mean_ttft_s,
        mean_turnaround_s: r.mean_turnaround_s,
        completed: r.completed as f64,
    })
}

fn mean_row(rows: &[SweepRow]) -> SweepRow {
    let n = rows.len() as f64;
    SweepRow {
        strategy: rows[0].strategy,
        lambda: rows[0].lambda,
        seed: None,
        nominal_per_min: rows[0].nominal_per_min,
        offered_per_min: rows.iter().map(|r| r.offered_per_min).sum::<f64>() / n,
        throughput_per_min: rows.iter().map(|r| r.throughput_per_min).sum::<f64>() / n,
        mean_ttft_s: mean(rows.iter().filter_map(|r| r.mean_ttft_s)),
        mean_turnaround_s: mean(rows.iter().filter_map(|r| r.mean_turnaround_s)),
        completed: rows.iter().map(|r| r.completed).sum::<f64>() / n,
    }
}

/// Runs every (strategy, lambda, seed) point in profile mode. Returns the
/// per-seed rows followed by one mean row per (strategy, lambda), both in
/// input order. Points run on all available cores; results do not depend
/// on scheduling.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.lambdas.is_empty() || spec.seeds.is_empty() || spec.strategies.is_empty() {
        return Err(Error::InvalidConfig("sweep needs strategies, lambdas and seeds".into()));
    }
    let points: Vec<(usize, f64, u64)> = (0..spec.strategies.len())
        .flat_map(|s| spec.lambdas.iter().flat_map(move |&l| spec.seeds.iter().map(move |&seed| (s, l, seed))))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(points.len());
    let chunk = points.len().div_ceil(workers);
    let per_seed: Vec<SweepRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&(s, l, seed)| run_point(&spec.strategies[s], &spec.base, l, seed))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let means: Vec<SweepRow> = per_seed.chunks(spec.seeds.len()).map(mean_row).collect();
    Ok(per_seed.into_iter().chain(means).collect())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

/// First lambda, in ascending order, whose mean throughput falls below
/// `0.95` of the offered load (arrivals actually seen). Only mean rows of `strategy` are considered.
pub fn ridge_point(rows: &[SweepRow], strategy: StrategyKind) -> Option<f64> {
    let mut means: Vec<&SweepRow> = rows.iter().filter(|r| r.is_mean() && r.strategy == strategy).collect();
    means.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    means
        .into_iter()
        .find(|r| r.throughput_per_min < 0.95 * r.offered_per_min)
        .map(|r| r.lambda)
}
