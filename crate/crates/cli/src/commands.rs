use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use moeshare::consolidate::{consolidate, export_distance_csv, pairwise_distance_table, ExpertMap};
use moeshare::costmodel::{calibrate as fit, default_params, ParamsVariant};
use moeshare::engine::{build_device, dedicated_forward, request_summary, write_summary_csv, write_trace_csv, RequestSpec};
use moeshare::io::{to_canonical_json, write_atomic, write_csv};
use moeshare::model::{
    derive_variant, expert_param_count, init_base, load_checkpoint, nonexpert_param_count, save_checkpoint, HostStore,
    ModelId, ModelWeights,
};
use moeshare::quality::{compare_models, make_prompts, write_compare_csv, CompareSpec};
use moeshare::sim::{
    ridge_point, run_sim, sweep as run_sweep, write_event_log, write_sweep_csv, FunctionalService, MetricsReport,
    ProfileService, StrategyKind, SweepSpec,
};
use serde::Serialize;

use crate::config::{RunConfig, ServiceMode};
use crate::CliError;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }
}

fn generate_models(cfg: &RunConfig) -> Result<(ModelWeights, Vec<ModelWeights>), CliError> {
    let base = init_base(cfg.model, cfg.seed)?;
    let variants = cfg
        .variant_seeds()
        .into_iter()
        .map(|s| derive_variant(&base, s, cfg.eps_expert, cfg.eps_nonexpert))
        .collect::<moeshare::Result<Vec<_>>>()?;
    Ok((base, variants))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ModelWeights>, CliError> {
    paths.iter().map(|p| Ok(load_checkpoint(p)?)).collect()
}

/// Every `.moec` file in `dir`, sorted by model id.
fn load_store_dir(dir: &Path) -> Result<Vec<ModelWeights>, CliError> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("cannot read {}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.extension().is_some_and(|x| x == "moec") {
            paths.push(path);
        }
    }
    let mut models = load_all(&paths)?;
    models.sort_by(|a, b| a.id.cmp(&b.id));
    if models.is_empty() {
        return Err(CliError::Validation(format!("no checkpoints in {}", dir.display())));
    }
    Ok(models)
}

pub fn gen_models(ctx: &Context) -> Result<(), CliError> {
    let (base, variants) = generate_models(&ctx.cfg)?;
    println!(
        "expert params per expert: {}, non-expert params: {}",
        expert_param_count(&ctx.cfg.model),
        nonexpert_param_count(&ctx.cfg.model)
    );
    for m in std::iter::once(&base).chain(&variants) {
        let path = ctx.path(&format!("{}.moec", m.id));
        save_checkpoint(m, &path)?;
        println!("{} -> {} (checksum {:016x})", m.id, path.display(), m.checksum());
    }
    Ok(())
}

pub fn distances(ctx: &Context, paths: &[PathBuf], file: &str) -> Result<(), CliError> {
    let models = load_all(paths)?;
    let refs: Vec<&ModelWeights> = models.iter().collect();
    let table = pairwise_distance_table(&refs)?;
    let path = ctx.path(file);
    export_distance_csv(&table, &path)?;
    let means: Vec<String> = table.layer_means().iter().map(|m| format!("{m:.4}")).collect();
    println!("layer means: {}", means.join(" "));
    println!("wrote {}", path.display());
    Ok(())
}

pub fn build_map(ctx: &Context, paths: &[PathBuf], capacity: Option<usize>, file: &str) -> Result<(), CliError> {
    let models = load_all(paths)?;
    let refs: Vec<&ModelWeights> = models.iter().collect();
    let capacity = capacity.unwrap_or(ctx.cfg.capacity());
    let (_, map) = consolidate(&refs, capacity)?;
    let path = ctx.path(file);
    map.save(&path)?;
    println!("{} slots, per-model counts {:?}", map.len(), map.counts());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn infer(
    ctx: &Context,
    map_path: &Path,
    store_dir: &Path,
    target: &str,
    prompt: Vec<u32>,
    max_new_tokens: usize,
    dedicated: bool,
) -> Result<(), CliError> {
    let store = HostStore::from_models(load_store_dir(store_dir)?)?;
    let request = RequestSpec {
        target: ModelId::from(target),
        prompt,
        max_new_tokens,
        eos_token: u32::MAX,
    };
    let tokens = |t: &[u32]| t.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    if dedicated {
        let result = dedicated_forward(store.get(&request.target)?, &request)?;
        println!("tokens: {}", tokens(&result.tokens));
        return Ok(());
    }
    let map = ExpertMap::load(map_path)?;
    let mut device = build_device(map, &store)?;
    let (result, trace) = device.generate(&store, &request)?;
    let summary = request_summary(0, &result, &trace);
    println!("tokens: {}", tokens(&result.tokens));
    println!(
        "target {} reconfigured {} hits {} misses {} hit rate {:.4}",
        summary.target,
        trace.reconfigured,
        trace.hits,
        trace.misses,
        trace.hit_rate()
    );
    write_trace_csv(&ctx.path("infer_trace.csv"), [&trace])?;
    write_summary_csv(&ctx.path("infer_summary.csv"), &[summary])?;
    Ok(())
}

pub fn compare(ctx: &Context, store: Option<&Path>, file: &str) -> Result<(), CliError> {
    let c = &ctx.cfg;
    let spec = CompareSpec {
        config: c.model,
        variant_counts: c.compare.variant_counts.clone(),
        n_prompts: c.compare.n_prompts,
        prompt_len: c.compare.prompt_len,
        max_new_tokens: c.compare.max_new_tokens,
        eps_expert: c.eps_expert,
        eps_nonexpert: c.eps_nonexpert,
        capacity: c.capacity,
        seed: c.seed,
        n_bases: c.compare.n_bases,
    };
    let rows = match store {
        None => moeshare::quality::compare(&spec)?,
        Some(dir) => {
            let models = load_store_dir(dir)?;
            let mut rows = Vec::new();
            for &n in &spec.variant_counts {
                if n < 2 || n > models.len() {
                    return Err(CliError::Validation(format!(
                        "variant count {n} needs 2..={} models",
                        models.len()
                    )));
                }
                let cap = spec.capacity.unwrap_or(models[0].config.n_locations());
                let spec = CompareSpec {
                    config: models[0].config,
                    ..spec.clone()
                };
                rows.extend(compare_models(&models[..n], cap, &make_prompts(&spec), spec.max_new_tokens)?);
            }
            rows
        }
    };
    for r in &rows {
        println!(
            "{} variants {:?}: match {:.4} kl {:.6}",
            r.n_variants, r.method, r.token_match_rate, r.mean_kl
        );
    }
    let path = ctx.path(file);
    write_compare_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SimulateRow {
    strategy: StrategyKind,
    arrivals: usize,
    completed: usize,
    in_flight: usize,
    queued: usize,
    swaps: usize,
    throughput_per_min: f64,
    offered_per_min: f64,
    nominal_per_min: f64,
    mean_ttft_s: Option<f64>,
    mean_turnaround_s: Option<f64>,
    max_queue_len: usize,
}

impl From<&MetricsReport> for SimulateRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            strategy: r.strategy,
            arrivals: r.arrivals,
            completed: r.completed,
            in_flight: r.in_flight,
            queued: r.queued,
            swaps: r.swaps,
            throughput_per_min: r.throughput_per_min,
            offered_per_min: r.offered_per_min,
            nominal_per_min: r.nominal_per_min,
            mean_ttft_s: r.mean_ttft_s,
            mean_turnaround_s: r.mean_turnaround_s,
            max_queue_len: r.max_queue_len,
        }
    }
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.cfg;
    let mut workload = c.workload_spec();
    let models = match c.service {
        ServiceMode::Profile => None,
        ServiceMode::Functional => {
            let (_, variants) = generate_models(c)?;
            if variants.len() != workload.rates_per_s.len() {
                return Err(CliError::Config(format!(
                    "functional mode serves {} variants but the workload lists {} rates",
                    variants.len(),
                    workload.rates_per_s.len()
                )));
            }
            workload.model_ids = variants.iter().map(|m| m.id.clone()).collect();
            Some(variants)
        }
    };
    let mut reports = Vec::new();
    for &kind in &c.strategies {
        let strategy = c.strategy(kind)?;
        let out = match &models {
            None => run_sim(&strategy, &workload, &mut ProfileService::for_workload(&workload))?,
            Some(models) => {
                let mut src = FunctionalService::for_strategy(kind, models, c.capacity(), &workload)?;
                run_sim(&strategy, &workload, &mut src)?
            }
        };
        let r = &out.report;
        println!(
            "{}: {} arrivals, {} completed, throughput {:.3}/min, ttft {}, turnaround {}",
            kind.name(),
            r.arrivals,
            r.completed,
            r.throughput_per_min,
            fmt_s(r.mean_ttft_s),
            fmt_s(r.mean_turnaround_s)
        );
        write_event_log(&ctx.path(&format!("events_{}.csv", kind.name())), &out.log)?;
        reports.push(out.report);
    }
    write_csv(&ctx.path("simulate.csv"), reports.iter().map(SimulateRow::from))?;
    write_atomic(&ctx.path("simulate.json"), to_canonical_json(&reports)?.as_bytes())?;
    println!("wrote {}", ctx.out.display());
    Ok(())
}

fn fmt_s(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.3} s"))
}

pub fn sweep(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.cfg;
    let spec = SweepSpec {
        strategies: c.strategies.iter().map(|&k| c.strategy(k)).collect::<Result<_, _>>()?,
        lambdas: c.sweep.lambdas.clone(),
        seeds: c.sweep_seeds(),
        base: c.workload_spec(),
    };
    let rows = run_sweep(&spec)?;
    let path = ctx.path("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    let ridges: BTreeMap<&str, Option<f64>> =
        c.strategies.iter().map(|&k| (k.name(), ridge_point(&rows, k))).collect();
    for (name, ridge) in &ridges {
        match ridge {
            Some(x) => println!("{name}: ridge at lambda = {x}"),
            None => println!("{name}: no ridge in grid"),
        }
    }
    write_atomic(&ctx.path("ridges.json"), to_canonical_json(&ridges)?.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn calibrate(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.cfg;
    let cal = fit(
        c.calibration_targets,
        &default_params(ParamsVariant::Proposed),
        32,
        2,
        c.workload.prompt_len,
        c.workload.output_tokens,
    )?;
    println!("hit_prob {:.6}", cal.hit_prob);
    println!("prefill_factor {:.6}", cal.prefill_factor);
    println!("decode_ms_per_token {:.3}", cal.decode_ms_per_token);
    write_atomic(&ctx.path("calibration.json"), to_canonical_json(&cal)?.as_bytes())?;
    Ok(())
}
