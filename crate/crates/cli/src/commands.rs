use std::path::Path;
use std::time::Duration;

use pipereuse::cache::{
    simulate as simulate_once, trial_costs, write_trace_jsonl, PolicyKind, Summary,
};
use pipereuse::dag::{execution_plan, max_speedup_uniform, Dag, ExecutionPlan};
use pipereuse::early_stopping::{
    sh_budget, sh_subdags, successive_halving, ShParams, TrainingMode,
};
use pipereuse::opt::{build_instance, export_milp, solve_exact, DeltaSchedule};
use pipereuse::seed;
use pipereuse::workloads::{gen_kary_tree, save_profile, ProfileMetadata};
use rayon::prelude::*;
use serde::Serialize;

use crate::workload::{self, parse_tree, Workload};
use crate::{CliError, CliResult, CommonArgs, Format, SweepArgs};

/// Largest instance the exact solver is run on without `--force-opt`.
pub const OPT_MAX_NODES: usize = 40;
pub const OPT_MAX_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    WarmStart,
    Retrain,
}

impl From<Mode> for TrainingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::WarmStart => TrainingMode::WarmStart,
            Mode::Retrain => TrainingMode::Retrain,
        }
    }
}

/// One line of a sweep. Column order is part of the output format.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub policy: String,
    pub capacity: f64,
    pub trials: usize,
    pub mean_cost: f64,
    pub stdev: f64,
    pub speedup_vs_independent: f64,
    pub status: String,
}

#[derive(Debug, Clone, Copy)]
enum Policy {
    Sim(PolicyKind),
    Opt,
}

fn parse_policies(raw: &[String]) -> CliResult<Vec<Policy>> {
    if raw.is_empty() {
        return Err(CliError::config("at least one policy is required"));
    }
    raw.iter()
        .map(|p| {
            if p.eq_ignore_ascii_case("opt") {
                Ok(Policy::Opt)
            } else {
                Ok(Policy::Sim(p.parse()?))
            }
        })
        .collect()
}

fn parse_number(s: &str) -> CliResult<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("`{s}` is not a capacity")))?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(CliError::config(format!(
            "capacity must be non-negative, got {s}"
        )));
    }
    Ok(v)
}

pub fn parse_capacities(raw: &[String], total: f64) -> CliResult<Vec<f64>> {
    let mut out = Vec::new();
    for item in raw {
        let item = item.trim();
        if item == "all" {
            out.push(total);
        } else if let Some(p) = item.strip_suffix('%') {
            out.push(total * parse_number(p)? / 100.0);
        } else if let Some(spec) = item.strip_prefix("geom:") {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 3 {
                return Err(CliError::config(format!(
                    "`{item}` is not geom:LO:HI:COUNT"
                )));
            }
            let lo = parse_number(parts[0])?;
            let hi = parse_number(parts[1])?;
            let count: usize = parts[2]
                .parse()
                .map_err(|_| CliError::config(format!("bad count in `{item}`")))?;
            if lo <= 0.0 || hi < lo || count < 2 {
                return Err(CliError::config(format!(
                    "`{item}` needs 0 < LO <= HI and COUNT >= 2"
                )));
            }
            for i in 0..count {
                out.push(lo * (hi / lo).powf(i as f64 / (count - 1) as f64));
            }
        } else {
            out.push(parse_number(item)?);
        }
    }
    if out.is_empty() {
        return Err(CliError::config("the capacity sweep is empty"));
    }
    Ok(out)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(CliError::config("--workers must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output always serializes");
    s.push('\n');
    s
}

fn exceeds_guardrail(dag: &Dag, plan: &ExecutionPlan) -> bool {
    plan.distinct_nodes().len() > OPT_MAX_NODES || plan.len() > OPT_MAX_STEPS || dag.is_empty()
}

/// Best cost among the built-in policies' seeded runs.
fn incumbent(dag: &Dag, plan: &ExecutionPlan, capacity: f64) -> CliResult<f64> {
    let mut best =
        simulate_once(plan, dag, PolicyKind::Lru.build(0).as_mut(), capacity)?.total_cost;
    for kind in [PolicyKind::Reciprocal, PolicyKind::WReciprocal] {
        for s in 0..5 {
            best = best.min(simulate_once(plan, dag, kind.build(s).as_mut(), capacity)?.total_cost);
        }
    }
    Ok(best)
}

struct OptPoint {
    cost: f64,
    proved: bool,
    explored: u64,
    schedule: DeltaSchedule,
}

fn opt_point(
    dag: &Dag,
    plan: &ExecutionPlan,
    capacity: f64,
    time_limit: f64,
    force: bool,
) -> CliResult<OptPoint> {
    if !force && exceeds_guardrail(dag, plan) {
        return Ok(OptPoint {
            cost: incumbent(dag, plan, capacity)?,
            proved: false,
            explored: 0,
            schedule: DeltaSchedule::new(),
        });
    }
    if !(time_limit > 0.0) {
        return Err(CliError::config("--time-limit must be positive"));
    }
    let inst = build_instance(dag, plan, capacity)?;
    let r = solve_exact(&inst, Some(Duration::from_secs_f64(time_limit)))?;
    Ok(OptPoint {
        cost: r.optimal_cost,
        proved: r.proved_optimal,
        explored: r.explored_states,
        schedule: r.schedule,
    })
}

fn speedup(baseline: f64, cost: f64) -> f64 {
    if cost == 0.0 && baseline == 0.0 {
        1.0
    } else {
        baseline / cost
    }
}

/// Runs every (capacity, policy) point; rows come out capacity-major in the
/// order given, whatever order the points finish in.
fn sweep(
    dag: &Dag,
    plan: &ExecutionPlan,
    baseline: f64,
    args: &SweepArgs,
    seed_value: u64,
    workers: Option<usize>,
) -> CliResult<Vec<Row>> {
    let policies = parse_policies(&args.policies)?;
    let capacities = parse_capacities(&args.capacities, dag.total_size())?;
    if args.trials == 0 {
        return Err(CliError::config("--trials must be positive"));
    }
    let points: Vec<(f64, usize, Policy)> = capacities
        .iter()
        .flat_map(|&c| policies.iter().enumerate().map(move |(i, &p)| (c, i, p)))
        .collect();
    let results: Vec<CliResult<Row>> = with_workers(workers, || {
        points
            .par_iter()
            .map(|&(capacity, index, policy)| match policy {
                Policy::Sim(kind) => {
                    let base = seed::derive(seed_value, index as u64);
                    let (name, costs) =
                        trial_costs(plan, dag, |s| kind.build(s), capacity, args.trials, base)?;
                    let s = Summary::from_costs(name, capacity, &costs);
                    Ok(Row {
                        policy: s.policy,
                        capacity,
                        trials: s.trials,
                        mean_cost: s.mean,
                        stdev: s.stdev,
                        speedup_vs_independent: speedup(baseline, s.mean),
                        status: "ok".into(),
                    })
                }
                Policy::Opt => {
                    let p = opt_point(dag, plan, capacity, args.time_limit, args.force_opt)?;
                    Ok(Row {
                        policy: "OPT".into(),
                        capacity,
                        trials: 1,
                        mean_cost: p.cost,
                        stdev: 0.0,
                        speedup_vs_independent: speedup(baseline, p.cost),
                        status: if p.proved { "optimal" } else { "timeout" }.into(),
                    })
                }
            })
            .collect()
    })?;
    results.into_iter().collect()
}

fn format_of(common: &CommonArgs, default: Format) -> Format {
    common.format.unwrap_or(default)
}

fn resolve(common: &CommonArgs) -> CliResult<Workload> {
    workload::resolve(common.workload.as_deref(), &common.space, common.seed)
}

#[derive(Debug, Serialize)]
struct MergeReport {
    pipelines: usize,
    distinct_pipelines: usize,
    unmerged_nodes: usize,
    merged_nodes: usize,
    level_sizes: Vec<usize>,
    tp_independent: f64,
    tp_merged: f64,
    speedup: Option<f64>,
    max_speedup_uniform: Option<f64>,
}

pub fn merge_report(common: &CommonArgs) -> CliResult<()> {
    let w = resolve(common)?;
    let dag = &w.dag;
    let paths = dag.paths();
    let skip = usize::from(dag.has_synthetic_root());
    let lengths: Vec<usize> = paths.iter().map(|p| p.len() - skip).collect();
    let costs: Vec<f64> = dag.operator_nodes().map(|n| n.cost).collect();
    let uniform =
        costs.windows(2).all(|c| c[0] == c[1]) && lengths.windows(2).all(|l| l[0] == l[1]);
    let mut levels = dag.level_sizes();
    if skip == 1 {
        levels.remove(0);
    }
    let report = MergeReport {
        pipelines: w.pipelines.len(),
        distinct_pipelines: paths.len(),
        unmerged_nodes: lengths.iter().sum(),
        merged_nodes: dag.operator_count(),
        level_sizes: levels,
        tp_independent: dag.total_cost_independent(),
        tp_merged: dag.total_cost_merged(),
        speedup: dag.speedup().ok(),
        max_speedup_uniform: (uniform && !lengths.is_empty())
            .then(|| max_speedup_uniform(lengths[0], paths.len())),
    };
    let text = match format_of(common, Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let levels: Vec<String> = report.level_sizes.iter().map(|l| l.to_string()).collect();
            let rows = [
                ("pipelines", report.pipelines.to_string()),
                ("distinct_pipelines", report.distinct_pipelines.to_string()),
                ("unmerged_nodes", report.unmerged_nodes.to_string()),
                ("merged_nodes", report.merged_nodes.to_string()),
                ("level_sizes", levels.join(";")),
                ("tp_independent", report.tp_independent.to_string()),
                ("tp_merged", report.tp_merged.to_string()),
                ("speedup", opt(report.speedup)),
                ("max_speedup_uniform", opt(report.max_speedup_uniform)),
            ];
            let mut s = String::from("metric,value\n");
            for (k, v) in rows {
                s.push_str(&format!("{k},{v}\n"));
            }
            s
        }
    };
    emit(common.out.as_deref(), &text)
}

fn emit_rows(common: &CommonArgs, rows: &[Row]) -> CliResult<()> {
    let text = match format_of(common, Format::Csv) {
        Format::Csv => to_csv(rows)?,
        Format::Json => to_json(rows),
    };
    emit(common.out.as_deref(), &text)
}

pub fn simulate(common: &CommonArgs, args: &SweepArgs, trace: Option<&Path>) -> CliResult<()> {
    let w = resolve(common)?;
    let plan = execution_plan(&w.dag)?;
    let rows = sweep(
        &w.dag,
        &plan,
        w.dag.total_cost_independent(),
        args,
        common.seed,
        common.workers,
    )?;
    if let Some(path) = trace {
        let policies = parse_policies(&args.policies)?;
        let caps = parse_capacities(&args.capacities, w.dag.total_size())?;
        let kind = match (policies.as_slice(), caps.len()) {
            ([Policy::Sim(kind)], 1) => *kind,
            _ => {
                return Err(CliError::config(
                    "--trace needs exactly one simulated policy and one capacity",
                ))
            }
        };
        let s = seed::derive(seed::derive(common.seed, 0), 0);
        let r = simulate_once(&plan, &w.dag, kind.build(s).as_mut(), caps[0])?;
        let file = std::fs::File::create(path)?;
        write_trace_jsonl(std::io::BufWriter::new(file), &r.trace)?;
    }
    emit_rows(common, &rows)
}

fn parse_sh(raw: &[String]) -> CliResult<ShParams> {
    if raw.len() != 4 {
        return Err(CliError::config("--sh expects four values: n,R,eta,G"));
    }
    let bad = |what: &str| CliError::config(format!("--sh expects n,R,eta,G; bad {what}"));
    let n = raw[0].trim().parse().map_err(|_| bad("n"))?;
    let r = raw[1].trim().parse().map_err(|_| bad("R"))?;
    let eta = raw[2].trim().parse().map_err(|_| bad("eta"))?;
    let g = raw[3].trim().parse().map_err(|_| bad("G"))?;
    Ok(ShParams::new(n, r, eta, g)?)
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Synthetic validation loss: a per-configuration level plus noise that
/// shrinks as training approaches the maximum resource.
fn synthetic_score(max_resource: f64) -> impl Fn(&usize, f64, u64) -> Result<f64, String> + Sync {
    move |_c: &usize, resource: f64, s: u64| {
        let level = unit(seed::mix(s));
        let noise = unit(seed::mix(s ^ resource.to_bits()));
        Ok(level + 0.05 * (1.0 - resource / max_resource) * noise)
    }
}

#[derive(Debug, Serialize)]
struct ShBudgetReport {
    successive_halving_r: f64,
    no_early_stopping_r: f64,
    ratio: f64,
}

#[derive(Debug, Serialize)]
struct ShGenerationReport {
    generation: usize,
    resource: f64,
    cost_factor: f64,
    trained: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct ShReport<'a> {
    budget: ShBudgetReport,
    winner: usize,
    winner_score: f64,
    generations: Vec<ShGenerationReport>,
    rows: &'a [Row],
}

pub fn sh(
    common: &CommonArgs,
    args: &SweepArgs,
    raw: &[String],
    mode: Mode,
    dump: Option<&Path>,
) -> CliResult<()> {
    let params = parse_sh(raw)?;
    let w = resolve(common)?;
    let pipelines = w.dag.paths().len();
    if pipelines != params.n {
        return Err(CliError::config(format!(
            "--sh n={} but the workload has {pipelines} distinct pipelines",
            params.n
        )));
    }
    let ids: Vec<usize> = (0..pipelines).collect();
    let outcome = successive_halving(
        &ids,
        &params,
        &synthetic_score(params.max_resource),
        common.seed,
    )?;
    let work = sh_subdags(
        &w.dag,
        &outcome.trained_per_generation(),
        &params,
        mode.into(),
    )?;
    let plan = work.plan()?;
    let rows = sweep(
        &work.dag,
        &plan,
        w.dag.total_cost_independent(),
        args,
        common.seed,
        common.workers,
    )?;

    if let Some(dir) = dump {
        std::fs::create_dir_all(dir)?;
        for (i, dag) in work.generation_dags()?.iter().enumerate() {
            let file = save_profile(dag, ProfileMetadata::default());
            std::fs::write(
                dir.join(format!("generation_{}.json", i + 1)),
                file.to_json(),
            )?;
        }
    }

    let b = sh_budget(&params);
    let budget = ShBudgetReport {
        successive_halving_r: b.successive_halving / params.max_resource,
        no_early_stopping_r: b.no_early_stopping / params.max_resource,
        ratio: b.ratio,
    };
    match format_of(common, Format::Csv) {
        Format::Csv => {
            eprintln!(
                "training budget: successive halving {}R, no early stopping {}R",
                budget.successive_halving_r, budget.no_early_stopping_r
            );
            emit(common.out.as_deref(), &to_csv(&rows)?)
        }
        Format::Json => {
            let report = ShReport {
                budget,
                winner: outcome.winner,
                winner_score: outcome.winner_score,
                generations: work
                    .generations
                    .iter()
                    .map(|g| ShGenerationReport {
                        generation: g.generation,
                        resource: g.resource,
                        cost_factor: g.cost_factor,
                        trained: g.pipelines.clone(),
                    })
                    .collect(),
                rows: &rows,
            };
            emit(common.out.as_deref(), &to_json(&report))
        }
    }
}

#[derive(Debug, Serialize)]
struct OptRow {
    capacity: f64,
    optimal_cost: f64,
    proved_optimal: bool,
    explored_states: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule: Option<DeltaSchedule>,
}

pub fn opt(
    common: &CommonArgs,
    raw: &[String],
    time_limit: f64,
    force: bool,
    milp: Option<&Path>,
) -> CliResult<()> {
    let w = resolve(common)?;
    let plan = execution_plan(&w.dag)?;
    let capacities = parse_capacities(raw, w.dag.total_size())?;
    if let Some(path) = milp {
        if capacities.len() != 1 {
            return Err(CliError::config("--milp needs exactly one capacity"));
        }
        std::fs::write(
            path,
            export_milp(&build_instance(&w.dag, &plan, capacities[0])?),
        )?;
    }
    let format = format_of(common, Format::Json);
    let results: Vec<CliResult<OptRow>> = with_workers(common.workers, || {
        capacities
            .par_iter()
            .map(|&capacity| {
                let p = opt_point(&w.dag, &plan, capacity, time_limit, force)?;
                Ok(OptRow {
                    capacity,
                    optimal_cost: p.cost,
                    proved_optimal: p.proved,
                    explored_states: p.explored,
                    status: if p.proved { "optimal" } else { "timeout" },
                    schedule: (format == Format::Json).then_some(p.schedule),
                })
            })
            .collect()
    })?;
    let rows: Vec<OptRow> = results.into_iter().collect::<CliResult<_>>()?;
    let text = match format {
        Format::Json => to_json(&rows),
        Format::Csv => to_csv(&rows)?,
    };
    emit(common.out.as_deref(), &text)
}

#[derive(Debug, Serialize)]
struct SampleRow {
    pipeline: usize,
    stages: String,
}

pub fn sample(common: &CommonArgs) -> CliResult<()> {
    let name = common
        .space
        .space
        .as_deref()
        .or_else(|| {
            common
                .workload
                .as_deref()
                .and_then(|w| w.strip_prefix("space:"))
        })
        .ok_or_else(|| CliError::config("sample needs --space"))?;
    let space = workload::load_space(name)?;
    let pipelines = workload::sample(&space, &common.space, common.seed)?;
    let staged: Vec<Vec<String>> = pipelines
        .iter()
        .map(|p| p.stages.iter().map(|s| s.canonical().to_string()).collect())
        .collect();
    let text = match format_of(common, Format::Json) {
        Format::Json => to_json(&staged),
        Format::Csv => {
            let rows: Vec<SampleRow> = staged
                .iter()
                .enumerate()
                .map(|(i, s)| SampleRow {
                    pipeline: i,
                    stages: s.join(" > "),
                })
                .collect();
            to_csv(&rows)?
        }
    };
    emit(common.out.as_deref(), &text)
}

pub fn gen_tree(body: &str, out: Option<&Path>) -> CliResult<()> {
    let dag = gen_kary_tree(&parse_tree(body)?)?;
    let mut text = save_profile(&dag, ProfileMetadata::default()).to_json();
    text.push('\n');
    emit(out, &text)
}
