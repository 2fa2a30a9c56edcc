//! Bounded-cache execution of a plan under online eviction policies.
//!
//! Step `t` of a plan executes node `i_t`. Its cost is paid unless some node
//! of the active set (`i_t` and everything after it on the current path) is
//! already resident, judged on the cache as it stood before the step. The
//! policy is then asked whether to admit `i_t` and what to evict for it.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{Dag, ExecutionPlan, NodeId};
use crate::error::{Error, Result};
use crate::seed;

/// Resident set plus occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    resident: BTreeSet<NodeId>,
    used: f64,
    capacity: f64,
}

impl CacheState {
    pub fn new(capacity: f64) -> Self {
        CacheState {
            resident: BTreeSet::new(),
            used: 0.0,
            capacity,
        }
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.resident.contains(&id)
    }

    pub fn resident(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.resident.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn used(&self) -> f64 {
        self.used
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn free(&self) -> f64 {
        self.capacity - self.used
    }

    pub fn fits(&self, size: f64) -> bool {
        self.used + size <= self.capacity
    }

    fn insert(&mut self, id: NodeId, size: f64) {
        if self.resident.insert(id) {
            self.used += size;
        }
    }

    fn remove(&mut self, id: NodeId, size: f64) {
        if self.resident.remove(&id) {
            self.used -= size;
            if self.resident.is_empty() {
                self.used = 0.0;
            }
        }
    }
}

/// Per-node bookkeeping visible to policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub last_use: Option<usize>,
    pub cost: f64,
    pub size: f64,
    /// Plan steps that have executed this node so far.
    pub references: usize,
}

/// What a policy sees when asked about admitting `incoming`.
pub struct PolicyContext<'a> {
    pub t: usize,
    pub incoming: NodeId,
    pub cache: &'a CacheState,
    pub stats: &'a [NodeStats],
}

impl PolicyContext<'_> {
    pub fn stats(&self, id: NodeId) -> &NodeStats {
        &self.stats[id.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Reject,
    Admit { evict: Vec<NodeId> },
}

/// An online eviction policy. Only consulted when `incoming` is not resident
/// and could fit in an empty cache.
pub trait CachePolicy: Send {
    fn name(&self) -> &str;

    fn decide(&mut self, ctx: &PolicyContext<'_>) -> Decision;

    fn seed(&self) -> Option<u64> {
        None
    }

    fn is_deterministic(&self) -> bool {
        self.seed().is_none()
    }
}

/// Evicts least recently used residents until the incoming item fits.
#[derive(Debug, Clone, Default)]
pub struct Lru;

impl CachePolicy for Lru {
    fn name(&self) -> &str {
        "LRU"
    }

    fn decide(&mut self, ctx: &PolicyContext<'_>) -> Decision {
        let size = ctx.stats(ctx.incoming).size;
        let mut order: Vec<NodeId> = ctx.cache.resident().collect();
        order.sort_by_key(|&id| (ctx.stats(id).last_use, id));
        let mut free = ctx.cache.free();
        let mut evict = Vec::new();
        for id in order {
            if size <= free {
                break;
            }
            free += ctx.stats(id).size;
            evict.push(id);
        }
        Decision::Admit { evict }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Weighting {
    Reciprocal,
    SizeOverCost,
}

/// Cost-aware eviction lottery. Candidates are the residents and the incoming
/// item; drawing the incoming item rejects it and undoes the step's draws.
#[derive(Debug, Clone)]
pub struct Lottery {
    weighting: Weighting,
    seed: u64,
    rng: ChaCha8Rng,
}

impl Lottery {
    pub fn reciprocal(seed: u64) -> Self {
        Lottery {
            weighting: Weighting::Reciprocal,
            seed,
            rng: seed::rng(seed),
        }
    }

    pub fn weighted_reciprocal(seed: u64) -> Self {
        Lottery {
            weighting: Weighting::SizeOverCost,
            seed,
            rng: seed::rng(seed),
        }
    }

    /// Natural log of the unnormalized weight.
    fn log_weight(&self, stats: &NodeStats) -> f64 {
        let denom = stats.cost.max(f64::MIN_POSITIVE).ln();
        match self.weighting {
            Weighting::Reciprocal => -denom,
            Weighting::SizeOverCost => stats.size.ln() - denom,
        }
    }
}

/// Eviction weights proportional to `exp(log_weights)`, scaled so the largest
/// is 1. All-zero weights fall back to uniform.
pub fn normalized_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0; log_weights.len()];
    }
    log_weights.iter().map(|&w| (w - max).exp()).collect()
}

fn draw(rng: &mut ChaCha8Rng, weights: &[f64], alive: &[bool]) -> usize {
    let total: f64 = weights
        .iter()
        .zip(alive)
        .filter(|(_, &a)| a)
        .map(|(w, _)| w)
        .sum();
    if total <= 0.0 {
        let live: Vec<usize> = (0..weights.len()).filter(|&i| alive[i]).collect();
        return live[rng.gen_range(0..live.len())];
    }
    let mut x = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, (&w, &a)) in weights.iter().zip(alive).enumerate() {
        if !a || w <= 0.0 {
            continue;
        }
        last = i;
        if x < w {
            return i;
        }
        x -= w;
    }
    last
}

impl CachePolicy for Lottery {
    fn name(&self) -> &str {
        match self.weighting {
            Weighting::Reciprocal => "RECIPROCAL",
            Weighting::SizeOverCost => "WRECIPROCAL",
        }
    }

    fn decide(&mut self, ctx: &PolicyContext<'_>) -> Decision {
        let size = ctx.stats(ctx.incoming).size;
        if ctx.cache.fits(size) {
            return Decision::Admit { evict: Vec::new() };
        }
        let mut candidates: Vec<NodeId> = ctx.cache.resident().collect();
        candidates.push(ctx.incoming);
        let logs: Vec<f64> = candidates
            .iter()
            .map(|&id| self.log_weight(ctx.stats(id)))
            .collect();
        let weights = normalized_weights(&logs);
        let incoming = candidates.len() - 1;
        let mut alive = vec![true; candidates.len()];
        let mut free = ctx.cache.free();
        let mut evict = Vec::new();
        while size > free {
            let k = draw(&mut self.rng, &weights, &alive);
            if k == incoming {
                return Decision::Reject;
            }
            alive[k] = false;
            free += ctx.stats(candidates[k]).size;
            evict.push(candidates[k]);
        }
        Decision::Admit { evict }
    }

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
}

pub fn policy_lru() -> Box<dyn CachePolicy> {
    Box::new(Lru)
}

pub fn policy_reciprocal(seed: u64) -> Box<dyn CachePolicy> {
    Box::new(Lottery::reciprocal(seed))
}

pub fn policy_wreciprocal(seed: u64) -> Box<dyn CachePolicy> {
    Box::new(Lottery::weighted_reciprocal(seed))
}

/// The built-in policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PolicyKind {
    Lru,
    Reciprocal,
    WReciprocal,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [
        PolicyKind::Lru,
        PolicyKind::Reciprocal,
        PolicyKind::WReciprocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Lru => "LRU",
            PolicyKind::Reciprocal => "RECIPROCAL",
            PolicyKind::WReciprocal => "WRECIPROCAL",
        }
    }

    pub fn build(self, seed: u64) -> Box<dyn CachePolicy> {
        match self {
            PolicyKind::Lru => policy_lru(),
            PolicyKind::Reciprocal => policy_reciprocal(seed),
            PolicyKind::WReciprocal => policy_wreciprocal(seed),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(PolicyKind::Lru),
            "reciprocal" => Ok(PolicyKind::Reciprocal),
            "wreciprocal" => Ok(PolicyKind::WReciprocal),
            _ => Err(Error::config(format!(
                "unknown policy `{s}` (expected lru, reciprocal or wreciprocal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Computed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub node: NodeId,
    pub outcome: Outcome,
    pub cost: f64,
    /// Resident node that made the step free.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub admitted: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evicted: Vec<NodeId>,
    pub used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: String,
    pub seed: Option<u64>,
    pub capacity: f64,
    pub total_cost: f64,
    pub computed: usize,
    pub skipped: usize,
    pub trace: Vec<StepTrace>,
}

fn check_capacity(capacity: f64) -> Result<()> {
    if capacity.is_nan() || capacity < 0.0 {
        return Err(Error::config(format!(
            "capacity must be non-negative, got {capacity}"
        )));
    }
    Ok(())
}

fn check_plan(plan: &ExecutionPlan, dag: &Dag) -> Result<()> {
    if let Some(step) = plan.steps().iter().find(|s| s.node.index() >= dag.len()) {
        return Err(Error::structural(format!(
            "plan references node {} outside a DAG of {} nodes",
            step.node,
            dag.len()
        )));
    }
    Ok(())
}

/// Runs `plan` once under `policy` with an initially empty cache.
pub fn simulate(
    plan: &ExecutionPlan,
    dag: &Dag,
    policy: &mut dyn CachePolicy,
    capacity: f64,
) -> Result<SimResult> {
    check_capacity(capacity)?;
    check_plan(plan, dag)?;
    let mut stats: Vec<NodeStats> = dag
        .nodes()
        .iter()
        .map(|n| NodeStats {
            last_use: None,
            cost: n.cost,
            size: n.size,
            references: 0,
        })
        .collect();
    let mut cache = CacheState::new(capacity);
    let mut trace = Vec::with_capacity(plan.len());
    let mut total_cost = 0.0;
    let mut computed = 0;
    for t in 0..plan.len() {
        let node = plan.node_at(t);
        let active = plan.active_set(t)?;
        let hit = active.iter().copied().find(|&id| cache.contains(id));
        let cost = if hit.is_some() {
            0.0
        } else {
            stats[node.index()].cost
        };
        total_cost += cost;
        let outcome = if hit.is_some() {
            Outcome::Skipped
        } else {
            computed += 1;
            Outcome::Computed
        };
        stats[node.index()].last_use = Some(t);
        stats[node.index()].references += 1;
        if let Some(h) = hit {
            stats[h.index()].last_use = Some(t);
        }

        let mut admitted = Vec::new();
        let mut evicted = Vec::new();
        let size = stats[node.index()].size;
        if !cache.contains(node) && size <= capacity {
            let ctx = PolicyContext {
                t,
                incoming: node,
                cache: &cache,
                stats: &stats,
            };
            if let Decision::Admit { evict } = policy.decide(&ctx) {
                let mut seen = BTreeSet::new();
                for &e in &evict {
                    if e == node {
                        return Err(Error::contract(format!(
                            "{} evicted the incoming node {node} at step {t}",
                            policy.name()
                        )));
                    }
                    if !cache.contains(e) || !seen.insert(e) {
                        return Err(Error::contract(format!(
                            "{} evicted non-resident node {e} at step {t}",
                            policy.name()
                        )));
                    }
                }
                for &e in &evict {
                    cache.remove(e, stats[e.index()].size);
                }
                if !cache.fits(size) {
                    return Err(Error::contract(format!(
                        "{} admitted {node} at step {t} without freeing enough space ({} used of {capacity}, need {size})",
                        policy.name(),
                        cache.used()
                    )));
                }
                cache.insert(node, size);
                admitted.push(node);
                evicted = evict;
            }
        }
        trace.push(StepTrace {
            t,
            node,
            outcome,
            cost,
            hit,
            admitted,
            evicted,
            used: cache.used(),
        });
    }
    Ok(SimResult {
        policy: policy.name().to_string(),
        seed: policy.seed(),
        capacity,
        total_cost,
        computed,
        skipped: plan.len() - computed,
        trace,
    })
}

/// Recomputes the cost of a recorded trace from its admissions and evictions
/// alone, checking it is a legal schedule.
pub fn replay(plan: &ExecutionPlan, dag: &Dag, trace: &[StepTrace], capacity: f64) -> Result<f64> {
    check_capacity(capacity)?;
    check_plan(plan, dag)?;
    if trace.len() != plan.len() {
        return Err(Error::contract(format!(
            "trace has {} steps for a plan of {}",
            trace.len(),
            plan.len()
        )));
    }
    let mut cache = CacheState::new(capacity);
    let mut total = 0.0;
    for (t, step) in trace.iter().enumerate() {
        let node = plan.node_at(t);
        if step.node != node {
            return Err(Error::contract(format!(
                "trace step {t} names {} but the plan runs {node}",
                step.node
            )));
        }
        let active = plan.active_set(t)?;
        if !active.iter().any(|&id| cache.contains(id)) {
            total += dag.node(node).cost;
        }
        for &e in &step.evicted {
            if !cache.contains(e) {
                return Err(Error::contract(format!(
                    "trace evicts non-resident {e} at step {t}"
                )));
            }
            cache.remove(e, dag.node(e).size);
        }
        for &a in &step.admitted {
            if a != node {
                return Err(Error::contract(format!(
                    "trace admits non-active {a} at step {t}"
                )));
            }
            cache.insert(a, dag.node(a).size);
        }
        if cache.used() > capacity {
            return Err(Error::contract(format!(
                "trace exceeds capacity at step {t}"
            )));
        }
    }
    Ok(total)
}

/// Writes one JSON object per step.
pub fn write_trace_jsonl<W: Write>(mut out: W, trace: &[StepTrace]) -> Result<()> {
    for step in trace {
        serde_json::to_writer(&mut out, step)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<StepTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub capacity: f64,
    pub trials: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub stdev: f64,
    pub min: f64,
    pub max: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Summary {
    pub fn from_costs(policy: impl Into<String>, capacity: f64, costs: &[f64]) -> Self {
        assert!(!costs.is_empty());
        let n = costs.len();
        let mean = costs.iter().sum::<f64>() / n as f64;
        let stdev = if n > 1 {
            (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = costs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            policy: policy.into(),
            capacity,
            trials: n,
            mean,
            stdev,
            min: sorted[0],
            max: sorted[n - 1],
            q05: quantile(&sorted, 0.05),
            q25: quantile(&sorted, 0.25),
            q50: quantile(&sorted, 0.50),
            q75: quantile(&sorted, 0.75),
            q95: quantile(&sorted, 0.95),
        }
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Total cost of each of `trials` independent simulations; trial `i` builds
/// its policy from `seed::derive(base_seed, i)`. Deterministic policies run
/// once and the result is repeated.
pub fn trial_costs<F>(
    plan: &ExecutionPlan,
    dag: &Dag,
    factory: F,
    capacity: f64,
    trials: usize,
    base_seed: u64,
) -> Result<(String, Vec<f64>)>
where
    F: Fn(u64) -> Box<dyn CachePolicy> + Sync,
{
    if trials == 0 {
        return Err(Error::config("at least one trial is required"));
    }
    let mut first = factory(seed::derive(base_seed, 0));
    let name = first.name().to_string();
    let r0 = simulate(plan, dag, first.as_mut(), capacity)?.total_cost;
    if first.is_deterministic() {
        return Ok((name, vec![r0; trials]));
    }
    let rest: Vec<Result<f64>> = (1..trials)
        .into_par_iter()
        .map(|i| {
            let mut p = factory(seed::derive(base_seed, i as u64));
            simulate(plan, dag, p.as_mut(), capacity).map(|r| r.total_cost)
        })
        .collect();
    let mut costs = Vec::with_capacity(trials);
    costs.push(r0);
    for r in rest {
        costs.push(r?);
    }
    Ok((name, costs))
}

pub fn run_trials<F>(
    plan: &ExecutionPlan,
    dag: &Dag,
    factory: F,
    capacity: f64,
    trials: usize,
    base_seed: u64,
) -> Result<Summary>
where
    F: Fn(u64) -> Box<dyn CachePolicy> + Sync,
{
    let (name, costs) = trial_costs(plan, dag, factory, capacity, trials, base_seed)?;
    Ok(Summary::from_costs(name, capacity, &costs))
}
