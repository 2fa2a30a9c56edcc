//! Turning `--workload` / `--space` arguments into an annotated DAG.

use std::path::Path;

use pipereuse::dag::{merge_pipelines, merge_pipelines_with, Dag, PipelineSpec};
use pipereuse::space::{
    sample_grid, sample_gridded_random, sample_random, BranchingPlan, GridCounts, SearchSpace,
    DEFAULT_GRID_CAP,
};
use pipereuse::workloads::{
    annotate_stages, builtin_space, disjoint_pipelines, gen_kary_tree, load_profile_file,
    sh_example_pipelines, toy_pipelines, CostModel, SizeModel, StageCost, TreeSpec,
};

use crate::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct Workload {
    pub dag: Dag,
    pub pipelines: Vec<PipelineSpec>,
}

impl Workload {
    fn from_dag(dag: Dag) -> Self {
        let pipelines = dag.pipelines();
        Workload { dag, pipelines }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Sampler {
    Gridded,
    Random,
    Grid,
}

/// Sampling options shared by every command that accepts a search space.
#[derive(Debug, Clone, clap::Args)]
pub struct SpaceArgs {
    /// Builtin space name or path to a search-space JSON file.
    #[arg(long)]
    pub space: Option<String>,
    /// Per-stage branching factors for gridded random search, e.g. 4,5,5.
    #[arg(long, value_delimiter = ',')]
    pub branching: Vec<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<Sampler>,
    /// Number of pipelines for random search.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Values per hyperparameter for grid search.
    #[arg(long, default_value_t = 2)]
    pub grid_count: usize,
    /// Per-stage `cost:size` pairs applied to sampled or merged pipelines,
    /// e.g. 1:10,5:10,50:1.
    #[arg(long, value_delimiter = ',')]
    pub stage_costs: Vec<String>,
}

pub fn load_space(name: &str) -> CliResult<SearchSpace> {
    if Path::new(name).is_file() {
        let text =
            std::fs::read_to_string(name).map_err(|e| CliError::config(format!("{name}: {e}")))?;
        Ok(SearchSpace::from_json(&text)?)
    } else {
        Ok(builtin_space(name)?)
    }
}

pub fn sample(space: &SearchSpace, args: &SpaceArgs, seed: u64) -> CliResult<Vec<PipelineSpec>> {
    let sampler = args.sampler.unwrap_or(if args.branching.is_empty() {
        Sampler::Random
    } else {
        Sampler::Gridded
    });
    Ok(match sampler {
        Sampler::Gridded => {
            if args.branching.is_empty() {
                return Err(CliError::config("gridded random search needs --branching"));
            }
            sample_gridded_random(space, &BranchingPlan::new(args.branching.clone()), seed)?
        }
        Sampler::Random => {
            if args.samples == 0 {
                return Err(CliError::config("--samples must be positive"));
            }
            sample_random(space, args.samples, seed)
        }
        Sampler::Grid => sample_grid(
            space,
            &GridCounts::uniform(args.grid_count),
            DEFAULT_GRID_CAP,
        )?,
    })
}

fn parse_stage_costs(raw: &[String]) -> CliResult<Vec<StageCost>> {
    raw.iter()
        .map(|item| {
            let (c, s) = item
                .split_once(':')
                .ok_or_else(|| CliError::config(format!("stage cost `{item}` is not cost:size")))?;
            let cost = c
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad cost in `{item}`")))?;
            let size = s
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("bad size in `{item}`")))?;
            Ok(StageCost { cost, size })
        })
        .collect()
}

fn unit_merge(ps: &[PipelineSpec]) -> CliResult<Dag> {
    Ok(merge_pipelines_with(ps, |_, _| Ok((1.0, 1.0)))?.dag)
}

fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    v.parse()
        .map_err(|_| CliError::config(format!("`{key}` expects a number, got `{v}`")))
}

fn parse_usize(key: &str, v: &str) -> CliResult<usize> {
    v.parse()
        .map_err(|_| CliError::config(format!("`{key}` expects an integer, got `{v}`")))
}

/// `tree:k=3,d=2,preset=root-heavy,seed=4` and friends.
pub fn parse_tree(body: &str) -> CliResult<TreeSpec> {
    let mut k = 3;
    let mut d = 3;
    let mut preset = "uniform".to_string();
    let mut cost = None;
    let mut size = None;
    let mut seed = 0u64;
    for kv in body.split(',').filter(|s| !s.is_empty()) {
        let (key, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("tree option `{kv}` is not key=value")))?;
        match key {
            "k" => k = parse_usize(key, v)?,
            "d" => d = parse_usize(key, v)?,
            "seed" => {
                seed = v
                    .parse()
                    .map_err(|_| CliError::config(format!("bad seed `{v}`")))?
            }
            "preset" => preset = v.to_string(),
            "cost" => cost = Some(parse_f64(key, v)?),
            "size" => size = Some(parse_f64(key, v)?),
            _ => return Err(CliError::config(format!("unknown tree option `{key}`"))),
        }
    }
    let mut spec = match preset.as_str() {
        "uniform" => TreeSpec::uniform(k, d),
        "root-heavy" => TreeSpec::root_heavy(k, d),
        "two-point" => TreeSpec::two_point(k, d, seed),
        other => return Err(CliError::config(format!("unknown tree preset `{other}`"))),
    };
    spec.seed = seed;
    if let Some(c) = cost {
        spec.cost = CostModel::Uniform { cost: c };
    }
    if let Some(m) = size {
        spec.size = SizeModel::Uniform { size: m };
        spec.coupled = false;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn resolve(workload: Option<&str>, space: &SpaceArgs, seed: u64) -> CliResult<Workload> {
    let stage_costs = parse_stage_costs(&space.stage_costs)?;
    let mut w = match workload {
        Some("toy") => Workload::from_dag(unit_merge(&toy_pipelines())?),
        Some("disjoint") => Workload::from_dag(unit_merge(&disjoint_pipelines(3, 3))?),
        Some("sh-example") => {
            let dag = merge_pipelines_with(&sh_example_pipelines(), |_, depth| {
                Ok((if depth == 3 { 1.0 } else { 0.5 }, 1.0))
            })?
            .dag;
            Workload::from_dag(dag)
        }
        Some("root-heavy") => Workload::from_dag(gen_kary_tree(&TreeSpec::root_heavy(3, 3))?),
        Some("two-point") => Workload::from_dag(gen_kary_tree(&TreeSpec::two_point(3, 3, seed))?),
        Some(w) if w.starts_with("tree:") => {
            Workload::from_dag(gen_kary_tree(&parse_tree(&w[5..])?)?)
        }
        Some(w) if w.starts_with("profile:") => {
            let p = load_profile_file(&w[8..])?;
            Workload {
                dag: p.dag,
                pipelines: p.pipelines,
            }
        }
        Some(w) if w.starts_with("space:") => space_workload(&w[6..], space, seed, &stage_costs)?,
        Some(other) => return Err(CliError::config(format!("unknown workload `{other}`"))),
        None => match &space.space {
            Some(name) => space_workload(name, space, seed, &stage_costs)?,
            None => return Err(CliError::config("either --workload or --space is required")),
        },
    };
    if !stage_costs.is_empty() {
        w.dag = annotate_stages(&w.dag, &stage_costs)?;
    }
    Ok(w)
}

fn space_workload(
    name: &str,
    args: &SpaceArgs,
    seed: u64,
    stage_costs: &[StageCost],
) -> CliResult<Workload> {
    let space = load_space(name)?;
    let pipelines = sample(&space, args, seed)?;
    let dag = if stage_costs.is_empty() {
        unit_merge(&pipelines)?
    } else {
        merge_pipelines(&pipelines)?.dag
    };
    Ok(Workload { dag, pipelines })
}
