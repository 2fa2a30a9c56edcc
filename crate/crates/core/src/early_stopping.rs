//! Iterative early stopping and Successive Halving.
//!
//! [`generic_early_stopping`] runs the step / prune / populate loop for any
//! strategy. [`successive_halving`] instantiates it: every generation trains
//! the surviving population at a geometrically growing resource and keeps the
//! best `1/eta` of it. [`sh_subdags`] turns the resulting survivor sets into
//! the sequence of pruned DAGs an executor actually runs, with each training
//! sink rescaled to the resource its generation allocates.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{Dag, DagBuilder, ExecutionPlan, NodeId, OpSignature, ParamValue};
use crate::error::{Error, Result};
use crate::seed;

/// User-defined pieces of an early-stopping loop.
pub trait EarlyStopping<C> {
    /// Partially trains `population` and returns one score per member,
    /// lower is better.
    fn step(&mut self, generation: usize, population: &[C]) -> Result<Vec<f64>>;

    /// Drops underperforming members.
    fn prune(&mut self, generation: usize, population: Vec<C>, scores: &[f64]) -> Vec<C>;

    /// Spawns the next generation from the survivors.
    fn populate(&mut self, generation: usize, population: Vec<C>) -> Vec<C>;
}

/// Closure-backed [`EarlyStopping`].
pub struct FnStrategy<S, P, Q> {
    pub step: S,
    pub prune: P,
    pub populate: Q,
}

impl<C, S, P, Q> EarlyStopping<C> for FnStrategy<S, P, Q>
where
    S: FnMut(usize, &[C]) -> Result<Vec<f64>>,
    P: FnMut(usize, Vec<C>, &[f64]) -> Vec<C>,
    Q: FnMut(usize, Vec<C>) -> Vec<C>,
{
    fn step(&mut self, generation: usize, population: &[C]) -> Result<Vec<f64>> {
        (self.step)(generation, population)
    }

    fn prune(&mut self, generation: usize, population: Vec<C>, scores: &[f64]) -> Vec<C> {
        (self.prune)(generation, population, scores)
    }

    fn populate(&mut self, generation: usize, population: Vec<C>) -> Vec<C> {
        (self.populate)(generation, population)
    }
}

/// What one generation of the generic loop saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog<C> {
    /// 1-based generation index.
    pub generation: usize,
    pub population: Vec<C>,
    pub scores: Vec<f64>,
    pub survivors: Vec<C>,
}

/// Runs `generations` rounds of step, prune and populate.
pub fn generic_early_stopping<C, S>(
    population: Vec<C>,
    generations: usize,
    strategy: &mut S,
) -> Result<(Vec<C>, Vec<GenerationLog<C>>)>
where
    C: Clone,
    S: EarlyStopping<C>,
{
    if population.is_empty() {
        return Err(Error::config("initial population is empty"));
    }
    if generations == 0 {
        return Err(Error::config("at least one generation is required"));
    }
    let mut population = population;
    let mut history = Vec::with_capacity(generations);
    for g in 1..=generations {
        let scores = strategy.step(g, &population)?;
        if scores.len() != population.len() {
            return Err(Error::contract(format!(
                "step returned {} scores for {} configurations",
                scores.len(),
                population.len()
            )));
        }
        let evaluated = population.clone();
        let survivors = strategy.prune(g, population, &scores);
        if survivors.is_empty() {
            return Err(Error::contract(format!(
                "prune emptied the population in generation {g}"
            )));
        }
        history.push(GenerationLog {
            generation: g,
            population: evaluated,
            scores,
            survivors: survivors.clone(),
        });
        population = strategy.populate(g, survivors);
        if population.is_empty() {
            return Err(Error::contract(format!(
                "populate emptied the population in generation {g}"
            )));
        }
    }
    Ok((population, history))
}

/// Successive Halving inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShParams {
    /// Initial population size.
    pub n: usize,
    /// Maximum resource per configuration.
    pub max_resource: f64,
    /// Elimination rate.
    pub eta: usize,
    pub generations: usize,
}

impl ShParams {
    pub fn new(n: usize, max_resource: f64, eta: usize, generations: usize) -> Result<Self> {
        let p = ShParams {
            n,
            max_resource,
            eta,
            generations,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta < 2 {
            return Err(Error::config(format!(
                "elimination rate must be at least 2, got {}",
                self.eta
            )));
        }
        if self.generations == 0 {
            return Err(Error::config("at least one generation is required"));
        }
        if !(self.max_resource > 0.0) || !self.max_resource.is_finite() {
            return Err(Error::config(format!(
                "maximum resource must be positive, got {}",
                self.max_resource
            )));
        }
        let needed = (self.eta as u128).checked_pow(self.generations as u32 - 1);
        if needed.is_none_or(|needed| (self.n as u128) < needed) {
            return Err(Error::config(format!(
                "n >= eta^(G-1) is required so that at least one configuration is trained for the maximum resource (n={}, eta={}, G={})",
                self.n, self.eta, self.generations
            )));
        }
        Ok(())
    }

    fn eta_pow(&self, e: usize) -> f64 {
        (self.eta as f64).powi(e as i32)
    }

    /// Resource per configuration in 1-based generation `g`: r * eta^(g-1).
    pub fn resource_at(&self, g: usize) -> f64 {
        assert!(g >= 1 && g <= self.generations);
        self.max_resource / self.eta_pow(self.generations - g)
    }

    /// Trained population size per generation.
    pub fn survivor_counts(&self) -> Vec<usize> {
        let mut counts = Vec::with_capacity(self.generations);
        let mut n = self.n;
        for _ in 0..self.generations {
            counts.push(n);
            n = (n / self.eta).max(1);
        }
        counts
    }

    /// Total resource actually allocated, summed generation by generation.
    pub fn allocated_resource(&self) -> f64 {
        self.survivor_counts()
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * self.resource_at(i + 1))
            .sum()
    }
}

/// r = R * eta^-(G-1).
pub fn min_resource(params: &ShParams) -> f64 {
    params.resource_at(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShBudget {
    /// n R eta^-(G-1) G.
    pub successive_halving: f64,
    /// n R.
    pub no_early_stopping: f64,
    /// eta^(G-1) / G.
    pub ratio: f64,
}

pub fn sh_budget(params: &ShParams) -> ShBudget {
    let n = params.n as f64;
    let g = params.generations as f64;
    let successive_halving = n * min_resource(params) * g;
    let no_early_stopping = n * params.max_resource;
    ShBudget {
        successive_halving,
        no_early_stopping,
        ratio: params.eta_pow(params.generations - 1) / g,
    }
}

/// Scores a configuration trained to a cumulative resource. Lower is better.
/// Must be deterministic for a given `(config, resource, seed)` and safe to
/// call from several threads.
pub trait ScoreOracle<C>: Sync {
    fn score(&self, config: &C, resource: f64, seed: u64) -> std::result::Result<f64, String>;
}

impl<C, F> ScoreOracle<C> for F
where
    F: Fn(&C, f64, u64) -> std::result::Result<f64, String> + Sync,
{
    fn score(&self, config: &C, resource: f64, seed: u64) -> std::result::Result<f64, String> {
        self(config, resource, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// 1-based generation index.
    pub generation: usize,
    /// Cumulative resource each configuration is trained to.
    pub resource: f64,
    /// Configurations trained in this generation, by index into the input.
    pub trained: Vec<usize>,
    /// Scores aligned with `trained`.
    pub scores: Vec<f64>,
    pub survivors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub generation: usize,
    pub config: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShOutcome {
    pub winner: usize,
    pub winner_score: f64,
    pub generations: Vec<GenerationRecord>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ShOutcome {
    /// Configurations trained in each generation; the input to [`sh_subdags`].
    pub fn trained_per_generation(&self) -> Vec<Vec<usize>> {
        self.generations.iter().map(|g| g.trained.clone()).collect()
    }
}

struct ShStrategy<'a, C, O: ?Sized> {
    configs: &'a [C],
    params: ShParams,
    oracle: &'a O,
    seed: u64,
    diagnostics: Vec<Diagnostic>,
}

impl<C, O> EarlyStopping<usize> for ShStrategy<'_, C, O>
where
    C: Sync,
    O: ScoreOracle<C> + ?Sized,
{
    fn step(&mut self, generation: usize, population: &[usize]) -> Result<Vec<f64>> {
        let resource = self.params.resource_at(generation);
        let results: Vec<std::result::Result<f64, String>> = population
            .par_iter()
            .map(|&id| {
                self.oracle.score(
                    &self.configs[id],
                    resource,
                    seed::derive(self.seed, id as u64),
                )
            })
            .collect();
        let mut scores = Vec::with_capacity(results.len());
        for (&id, r) in population.iter().zip(results) {
            match r {
                Ok(s) if !s.is_nan() => scores.push(s),
                Ok(_) => {
                    self.diagnostics.push(Diagnostic {
                        generation,
                        config: id,
                        message: "oracle returned NaN".into(),
                    });
                    scores.push(f64::INFINITY);
                }
                Err(message) => {
                    self.diagnostics.push(Diagnostic {
                        generation,
                        config: id,
                        message,
                    });
                    scores.push(f64::INFINITY);
                }
            }
        }
        Ok(scores)
    }

    fn prune(&mut self, _generation: usize, population: Vec<usize>, scores: &[f64]) -> Vec<usize> {
        let keep = (population.len() / self.params.eta).max(1);
        let mut ranked = rank(&population, scores);
        ranked.truncate(keep);
        ranked
    }

    fn populate(&mut self, _generation: usize, population: Vec<usize>) -> Vec<usize> {
        population
    }
}

/// Population sorted by ascending score, ties by id.
fn rank(population: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = scores
        .iter()
        .copied()
        .zip(population.iter().copied())
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, id)| id).collect()
}

/// Successive Halving over `configs`, identified by their index.
pub fn successive_halving<C, O>(
    configs: &[C],
    params: &ShParams,
    oracle: &O,
    seed: u64,
) -> Result<ShOutcome>
where
    C: Sync,
    O: ScoreOracle<C> + ?Sized,
{
    params.validate()?;
    if configs.len() != params.n {
        return Err(Error::config(format!(
            "successive halving configured for n={} but given {} configurations",
            params.n,
            configs.len()
        )));
    }
    let mut strategy = ShStrategy {
        configs,
        params: *params,
        oracle,
        seed,
        diagnostics: Vec::new(),
    };
    let (_, history) = generic_early_stopping(
        (0..configs.len()).collect(),
        params.generations,
        &mut strategy,
    )?;
    let last = history.last().expect("at least one generation");
    let best = rank(&last.population, &last.scores)[0];
    let winner_score = last.scores[last.population.iter().position(|&id| id == best).unwrap()];
    let generations = history
        .into_iter()
        .map(|log| GenerationRecord {
            generation: log.generation,
            resource: params.resource_at(log.generation),
            trained: log.population,
            scores: log.scores,
            survivors: log.survivors,
        })
        .collect();
    Ok(ShOutcome {
        winner: best,
        winner_score,
        generations,
        diagnostics: strategy.diagnostics,
    })
}

/// How a generation's training cost relates to its resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Training resumes from the previous generation's state; generation `g`
    /// pays for `r eta^(g-1) - r eta^(g-2)`.
    #[default]
    WarmStart,
    /// Every generation trains from scratch and pays for its full resource.
    Retrain,
}

/// One generation of an SH workload.
#[derive(Debug, Clone, PartialEq)]
pub struct ShGeneration {
    pub generation: usize,
    pub resource: f64,
    /// Multiplier applied to each full-resource training cost.
    pub cost_factor: f64,
    /// Surviving pipelines, by index into the source DAG's root-to-sink paths.
    pub pipelines: Vec<usize>,
    /// Plan paths in the workload DAG's id space.
    pub paths: Vec<Vec<NodeId>>,
}

/// The pruned DAGs of an SH run, sharing one node id space: preprocessing
/// nodes appear once, each generation has its own rescaled training sinks.
#[derive(Debug, Clone)]
pub struct ShWorkload {
    pub dag: Dag,
    pub generations: Vec<ShGeneration>,
    training: Vec<NodeId>,
}

impl ShWorkload {
    /// Generation plans concatenated in order.
    pub fn plan(&self) -> Result<ExecutionPlan> {
        ExecutionPlan::from_paths(
            self.generations
                .iter()
                .flat_map(|g| g.paths.iter().cloned())
                .collect(),
        )
    }

    /// Total cost of all training nodes across generations.
    pub fn training_cost(&self) -> f64 {
        self.training.iter().map(|&id| self.dag.node(id).cost).sum()
    }

    /// The standalone pruned DAG of 0-based generation index `index`.
    pub fn generation_dag(&self, index: usize) -> Result<Dag> {
        let gen = self
            .generations
            .get(index)
            .ok_or_else(|| Error::config(format!("no generation {index}")))?;
        let mut keep = vec![false; self.dag.len()];
        keep[self.dag.root().index()] = true;
        for path in &gen.paths {
            for id in path {
                keep[id.index()] = true;
            }
        }
        let mut builder = DagBuilder::new();
        let mut remap = HashMap::new();
        for node in self.dag.nodes().iter().filter(|n| keep[n.id.index()]) {
            remap.insert(
                node.id,
                builder.add_node(node.signature.clone(), node.cost, node.size),
            );
        }
        for (p, c) in self.dag.edges() {
            if keep[p.index()] && keep[c.index()] {
                builder.add_edge(remap[&p], remap[&c]);
            }
        }
        builder.build(remap[&self.dag.root()], self.dag.has_synthetic_root())
    }

    pub fn generation_dags(&self) -> Result<Vec<Dag>> {
        (0..self.generations.len())
            .map(|i| self.generation_dag(i))
            .collect()
    }
}

/// Builds the per-generation pruned DAGs for an SH run over `dag`, whose
/// sinks are the training nodes. `trained[g]` lists the pipelines (indices
/// into [`Dag::paths`]) trained in generation `g + 1`; the sets must be
/// nested. Non-training nodes keep their costs; each generation's training
/// nodes cost `cost_factor` times the full-resource cost.
pub fn sh_subdags(
    dag: &Dag,
    trained: &[Vec<usize>],
    params: &ShParams,
    mode: TrainingMode,
) -> Result<ShWorkload> {
    params.validate()?;
    if trained.len() != params.generations {
        return Err(Error::config(format!(
            "{} survivor sets given for {} generations",
            trained.len(),
            params.generations
        )));
    }
    let paths = dag.paths();
    let mut sinks_seen = HashMap::new();
    for (i, p) in paths.iter().enumerate() {
        let sink = *p.last().unwrap();
        if sink == dag.root() {
            return Err(Error::structural("DAG has no training node below the root"));
        }
        if let Some(other) = sinks_seen.insert(sink, i) {
            return Err(Error::structural(format!(
                "pipelines {other} and {i} share training node {sink}"
            )));
        }
    }
    for (g, set) in trained.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::structural(format!(
                "generation {} has no survivors",
                g + 1
            )));
        }
        if let Some(&bad) = set.iter().find(|&&p| p >= paths.len()) {
            return Err(Error::structural(format!(
                "survivor {bad} is not a pipeline of the DAG ({} pipelines)",
                paths.len()
            )));
        }
        if g > 0 && !set.iter().all(|p| trained[g - 1].contains(p)) {
            return Err(Error::structural(format!(
                "survivors of generation {} are not a subset of generation {}",
                g + 1,
                g
            )));
        }
    }

    let skip = usize::from(dag.has_synthetic_root());
    if params.generations == 1 {
        // A single full-resource generation is the source DAG itself; keeping
        // its ids keeps simulations identical to the unpruned workload.
        let mut set = trained[0].clone();
        set.sort_unstable();
        set.dedup();
        let training = set.iter().map(|&p| *paths[p].last().unwrap()).collect();
        let gen_paths = set.iter().map(|&p| paths[p][skip..].to_vec()).collect();
        return Ok(ShWorkload {
            dag: dag.clone(),
            generations: vec![ShGeneration {
                generation: 1,
                resource: params.resource_at(1),
                cost_factor: 1.0,
                pipelines: set,
                paths: gen_paths,
            }],
            training,
        });
    }

    let mut builder = DagBuilder::new();
    let mut remap = HashMap::new();
    for node in dag.nodes().iter().filter(|n| !dag.is_sink(n.id)) {
        remap.insert(
            node.id,
            builder.add_node(node.signature.clone(), node.cost, node.size),
        );
    }
    for (p, c) in dag.edges() {
        if !dag.is_sink(c) {
            builder.add_edge(remap[&p], remap[&c]);
        }
    }

    let mut generations = Vec::with_capacity(params.generations);
    let mut training = Vec::new();
    let mut previous_resource = 0.0;
    for (gi, set) in trained.iter().enumerate() {
        let g = gi + 1;
        let resource = params.resource_at(g);
        let cost_factor = match mode {
            TrainingMode::Retrain => resource / params.max_resource,
            TrainingMode::WarmStart => (resource - previous_resource) / params.max_resource,
        };
        previous_resource = resource;
        let mut set = set.clone();
        set.sort_unstable();
        set.dedup();
        let mut gen_paths = Vec::with_capacity(set.len());
        for &p in &set {
            let path = &paths[p];
            let sink = dag.node(*path.last().unwrap());
            let mut params_map = sink.signature.params().clone();
            params_map.insert("resource".into(), ParamValue::Float(resource));
            let signature = OpSignature::new(sink.signature.operator(), params_map);
            let id = builder.add_node(signature, sink.cost * cost_factor, sink.size);
            let parent = path[path.len() - 2];
            builder.add_edge(remap[&parent], id);
            training.push(id);
            let mut mapped: Vec<NodeId> = path[skip..path.len() - 1]
                .iter()
                .map(|n| remap[n])
                .collect();
            mapped.push(id);
            gen_paths.push(mapped);
        }
        generations.push(ShGeneration {
            generation: g,
            resource,
            cost_factor,
            pipelines: set,
            paths: gen_paths,
        });
    }
    let root = remap[&dag.root()];
    let workload_dag = builder.build(root, dag.has_synthetic_root())?;
    Ok(ShWorkload {
        dag: workload_dag,
        generations,
        training,
    })
}
