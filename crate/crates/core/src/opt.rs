//! Offline optimal caching.
//!
//! An [`IlpInstance`] fixes a plan, per-step costs and sizes, the active-set
//! columns and a capacity. [`solve_exact`] searches cache states step by step
//! for the cheapest schedule of admissions and evictions. [`validate_delta`]
//! checks any schedule against the constraint families of the integer program
//! and prices it, and [`export_milp`] writes that program in CPLEX LP format.
//!
//! State `X_t` is the cache before step `t` acts; step `t` is free iff some
//! node of `A_t` is in `X_t`, and `X_{t+1} = X_t + Delta_t`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::{self, PolicyKind, StepTrace};
use crate::dag::{Dag, ExecutionPlan, NodeId};
use crate::error::{Error, Result};

const BEAM_WIDTH: usize = 64;
const INCUMBENT_SEEDS: u64 = 4;

/// Capacity comparison shared by the solver and the validator.
fn within(used: f64, capacity: f64) -> bool {
    used <= capacity + 1e-9 * capacity.abs().max(1.0)
}

#[derive(Debug, Clone)]
pub struct IlpInstance {
    dag: Dag,
    plan: ExecutionPlan,
    /// Distinct plan nodes, ascending by id.
    nodes: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    step_node: Vec<usize>,
    active: Vec<Vec<usize>>,
    capacity: f64,
}

/// Builds the instance for `plan` over `dag` at `capacity`.
pub fn build_instance(dag: &Dag, plan: &ExecutionPlan, capacity: f64) -> Result<IlpInstance> {
    if capacity.is_nan() || capacity < 0.0 {
        return Err(Error::config(format!(
            "capacity must be non-negative, got {capacity}"
        )));
    }
    if let Some(s) = plan.steps().iter().find(|s| s.node.index() >= dag.len()) {
        return Err(Error::structural(format!(
            "plan references node {} outside the DAG",
            s.node
        )));
    }
    let mut nodes = plan.distinct_nodes();
    nodes.sort();
    let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let step_node = plan.steps().iter().map(|s| index[&s.node]).collect();
    let active = (0..plan.len())
        .map(|t| {
            plan.active_set(t)
                .map(|a| a.iter().map(|n| index[n]).collect())
        })
        .collect::<Result<_>>()?;
    Ok(IlpInstance {
        dag: dag.clone(),
        plan: plan.clone(),
        nodes,
        index,
        step_node,
        active,
        capacity,
    })
}

impl IlpInstance {
    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn plan(&self) -> &ExecutionPlan {
        &self.plan
    }

    /// The node set V, ascending by id.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// T.
    pub fn steps(&self) -> usize {
        self.step_node.len()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    /// Same plan at another capacity.
    pub fn with_capacity(&self, capacity: f64) -> Result<IlpInstance> {
        if capacity.is_nan() || capacity < 0.0 {
            return Err(Error::config(format!(
                "capacity must be non-negative, got {capacity}"
            )));
        }
        Ok(IlpInstance {
            capacity,
            ..self.clone()
        })
    }

    /// c_t.
    pub fn cost(&self, t: usize) -> f64 {
        self.dag.node(self.plan.node_at(t)).cost
    }

    /// m_t.
    pub fn size(&self, t: usize) -> f64 {
        self.dag.node(self.plan.node_at(t)).size
    }

    pub fn costs(&self) -> Vec<f64> {
        (0..self.steps()).map(|t| self.cost(t)).collect()
    }

    pub fn sizes(&self) -> Vec<f64> {
        (0..self.steps()).map(|t| self.size(t)).collect()
    }

    /// Active-set column A_t as indices into [`IlpInstance::nodes`].
    pub fn active(&self, t: usize) -> &[usize] {
        &self.active[t]
    }

    /// Index of i_t in V.
    pub fn step_node(&self, t: usize) -> usize {
        self.step_node[t]
    }

    pub fn index_of(&self, node: NodeId) -> Option<usize> {
        self.index.get(&node).copied()
    }

    fn node_size(&self, v: usize) -> f64 {
        self.dag.node(self.nodes[v]).size
    }

    /// Number of cache-state variables, |V| T.
    pub fn x_count(&self) -> usize {
        self.nodes.len() * self.steps()
    }

    /// Cost with an always-empty cache.
    pub fn recompute_cost(&self) -> f64 {
        (0..self.steps()).map(|t| self.cost(t)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    /// 0-based plan step.
    pub step: usize,
    pub node: NodeId,
    /// +1 admits, -1 evicts.
    pub delta: f64,
}

/// Sparse Delta matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaSchedule {
    pub entries: Vec<DeltaEntry>,
}

impl DeltaSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn admit(&mut self, step: usize, node: NodeId) {
        self.entries.push(DeltaEntry {
            step,
            node,
            delta: 1.0,
        });
    }

    pub fn evict(&mut self, step: usize, node: NodeId) {
        self.entries.push(DeltaEntry {
            step,
            node,
            delta: -1.0,
        });
    }

    /// The schedule a simulated run followed.
    pub fn from_trace(trace: &[StepTrace]) -> Self {
        let mut s = DeltaSchedule::new();
        for step in trace {
            for &e in &step.evicted {
                s.evict(step.t, e);
            }
            for &a in &step.admitted {
                s.admit(step.t, a);
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedules always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    StepOutOfRange {
        step: usize,
        node: NodeId,
    },
    UnknownNode {
        step: usize,
        node: NodeId,
    },
    NonIntegral {
        step: usize,
        node: NodeId,
        delta: f64,
    },
    DeltaBounds {
        step: usize,
        node: NodeId,
        delta: f64,
    },
    AdmitNonActive {
        step: usize,
        node: NodeId,
    },
    EvictActive {
        step: usize,
        node: NodeId,
    },
    InitialNotEmpty {
        step: usize,
        node: NodeId,
    },
    EvictNonResident {
        step: usize,
        node: NodeId,
    },
    StateOutOfRange {
        step: usize,
        node: NodeId,
        value: f64,
    },
    Capacity {
        step: usize,
        used: f64,
        capacity: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StepOutOfRange { step, node } => {
                write!(f, "step {step} for {node} is past the end of the plan")
            }
            Violation::UnknownNode { step, node } => {
                write!(f, "{node} at step {step} is not a plan node")
            }
            Violation::NonIntegral { step, node, delta } => {
                write!(f, "non-integral delta {delta} for {node} at step {step}")
            }
            Violation::DeltaBounds { step, node, delta } => {
                write!(f, "delta {delta} for {node} at step {step} outside [-1, 1]")
            }
            Violation::AdmitNonActive { step, node } => {
                write!(f, "{node} admitted at step {step} but not the active node")
            }
            Violation::EvictActive { step, node } => {
                write!(f, "active node {node} evicted at step {step}")
            }
            Violation::InitialNotEmpty { step, node } => {
                write!(f, "{node} evicted at step {step} before ever being cached")
            }
            Violation::EvictNonResident { step, node } => {
                write!(f, "{node} evicted at step {step} while not resident")
            }
            Violation::StateOutOfRange { step, node, value } => {
                write!(f, "{node} cached {value} times after step {step}")
            }
            Violation::Capacity {
                step,
                used,
                capacity,
            } => write!(f, "cache holds {used} of {capacity} before step {step}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub feasible: bool,
    /// Objective value; present for feasible schedules.
    pub cost: Option<f64>,
    pub violations: Vec<Violation>,
}

/// Checks `schedule` against every constraint family and prices it.
pub fn validate_delta(inst: &IlpInstance, schedule: &DeltaSchedule) -> Validation {
    let t_max = inst.steps();
    let n = inst.nodes.len();
    let mut violations = Vec::new();
    let mut by_step: Vec<Vec<(usize, f64, NodeId)>> = vec![Vec::new(); t_max];
    for e in &schedule.entries {
        if e.step >= t_max {
            violations.push(Violation::StepOutOfRange {
                step: e.step,
                node: e.node,
            });
            continue;
        }
        let Some(v) = inst.index_of(e.node) else {
            violations.push(Violation::UnknownNode {
                step: e.step,
                node: e.node,
            });
            continue;
        };
        if !e.delta.is_finite() || e.delta.fract() != 0.0 {
            violations.push(Violation::NonIntegral {
                step: e.step,
                node: e.node,
                delta: e.delta,
            });
            continue;
        }
        if !(-1.0..=1.0).contains(&e.delta) {
            violations.push(Violation::DeltaBounds {
                step: e.step,
                node: e.node,
                delta: e.delta,
            });
            continue;
        }
        if e.delta == 0.0 {
            continue;
        }
        let active = inst.step_node(e.step) == v;
        if e.delta > 0.0 && !active {
            violations.push(Violation::AdmitNonActive {
                step: e.step,
                node: e.node,
            });
        }
        if e.delta < 0.0 && active {
            violations.push(Violation::EvictActive {
                step: e.step,
                node: e.node,
            });
        }
        by_step[e.step].push((v, e.delta, e.node));
    }

    let mut x = vec![0.0f64; n];
    let mut ever = vec![false; n];
    let mut cost = 0.0;
    for t in 0..t_max {
        if !inst.active(t).iter().any(|&j| x[j] == 1.0) {
            cost += inst.cost(t);
        }
        for &(v, delta, node) in &by_step[t] {
            x[v] += delta;
            if x[v] < 0.0 {
                violations.push(if ever[v] {
                    Violation::EvictNonResident { step: t, node }
                } else {
                    Violation::InitialNotEmpty { step: t, node }
                });
                x[v] = 0.0;
            } else if x[v] > 1.0 {
                violations.push(Violation::StateOutOfRange {
                    step: t,
                    node,
                    value: x[v],
                });
                x[v] = 1.0;
            }
            if delta > 0.0 {
                ever[v] = true;
            }
        }
        let used: f64 = (0..n)
            .filter(|&v| x[v] == 1.0)
            .map(|v| inst.node_size(v))
            .sum();
        if !within(used, inst.capacity) {
            violations.push(Violation::Capacity {
                step: t + 1,
                used,
                capacity: inst.capacity,
            });
        }
    }
    let feasible = violations.is_empty();
    Validation {
        feasible,
        cost: feasible.then_some(cost),
        violations,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptResult {
    pub optimal_cost: f64,
    pub schedule: DeltaSchedule,
    pub proved_optimal: bool,
    pub explored_states: u64,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub time_limit: Option<Duration>,
    /// States kept per step once the time limit is hit.
    pub beam_width: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            time_limit: None,
            beam_width: BEAM_WIDTH,
        }
    }
}

/// Exact optimum, falling back to a bounded beam (and the best simulated
/// schedule) once `time_limit` elapses.
pub fn solve_exact(inst: &IlpInstance, time_limit: Option<Duration>) -> Result<OptResult> {
    solve_exact_with(
        inst,
        &SolveOptions {
            time_limit,
            ..SolveOptions::default()
        },
    )
}

type Bits = Box<[u64]>;

fn bits_new(n: usize) -> Bits {
    vec![0u64; n.div_ceil(64).max(1)].into_boxed_slice()
}

fn bit(b: &[u64], i: usize) -> bool {
    b[i / 64] >> (i % 64) & 1 == 1
}

fn set_bit(b: &mut [u64], i: usize) {
    b[i / 64] |= 1 << (i % 64);
}

fn clear_bit(b: &mut [u64], i: usize) {
    b[i / 64] &= !(1 << (i % 64));
}

fn intersects(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b).any(|(x, y)| x & y != 0)
}

fn members(b: &[u64]) -> impl Iterator<Item = usize> + '_ {
    b.iter().enumerate().flat_map(|(w, &word)| {
        (0..64)
            .filter(move |i| word >> i & 1 == 1)
            .map(move |i| w * 64 + i)
    })
}

struct Entry {
    state: Bits,
    cost: f64,
    parent: u32,
    admit: bool,
    evict: Box<[u32]>,
}

struct Tables {
    active: Vec<Bits>,
    /// Nodes still appearing in some active set at or after step t.
    live: Vec<Bits>,
    last_active: Vec<usize>,
    /// For each t: steps s >= t none of whose active nodes run in [t, s).
    unavoidable: Vec<Vec<usize>>,
}

fn tables(inst: &IlpInstance) -> Tables {
    let n = inst.nodes.len();
    let t_max = inst.steps();
    let active: Vec<Bits> = (0..t_max)
        .map(|t| {
            let mut b = bits_new(n);
            for &j in inst.active(t) {
                set_bit(&mut b, j);
            }
            b
        })
        .collect();
    let mut last_active = vec![0usize; n];
    let mut seen = vec![false; n];
    for t in 0..t_max {
        for &j in inst.active(t) {
            last_active[j] = t;
            seen[j] = true;
        }
    }
    let live = (0..=t_max)
        .map(|t| {
            let mut b = bits_new(n);
            for j in 0..n {
                if seen[j] && last_active[j] >= t {
                    set_bit(&mut b, j);
                }
            }
            b
        })
        .collect();
    // Latest step before s that runs a node of A_s.
    let mut last_run = vec![None::<usize>; n];
    let mut latest_before = vec![None::<usize>; t_max];
    for s in 0..t_max {
        latest_before[s] = inst.active(s).iter().filter_map(|&j| last_run[j]).max();
        last_run[inst.step_node(s)] = Some(s);
    }
    let unavoidable = (0..=t_max)
        .map(|t| {
            (t..t_max)
                .filter(|&s| latest_before[s].is_none_or(|u| u < t))
                .collect()
        })
        .collect();
    Tables {
        active,
        live,
        last_active,
        unavoidable,
    }
}

fn lower_bound(inst: &IlpInstance, tab: &Tables, t: usize, state: &[u64]) -> f64 {
    tab.unavoidable[t]
        .iter()
        .filter(|&&s| !intersects(&tab.active[s], state))
        .map(|&s| inst.cost(s))
        .sum()
}

/// Inclusion-minimal subsets of `residents` whose sizes reach `need`.
fn minimal_evictions(residents: &[(usize, f64)], need: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<(usize, f64)> = residents.iter().copied().filter(|r| r.1 > 0.0).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::new();
    let mut chosen = Vec::new();
    fn rec(
        order: &[(usize, f64)],
        i: usize,
        freed: f64,
        need: f64,
        chosen: &mut Vec<(usize, f64)>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if freed >= need {
            let minimal = chosen.iter().all(|&(_, s)| freed - s < need);
            if minimal {
                out.push(chosen.iter().map(|c| c.0).collect());
            }
            return;
        }
        if i == order.len() {
            return;
        }
        let rest: f64 = order[i..].iter().map(|o| o.1).sum();
        if freed + rest < need {
            return;
        }
        chosen.push(order[i]);
        rec(order, i + 1, freed + order[i].1, need, chosen, out);
        chosen.pop();
        rec(order, i + 1, freed, need, chosen, out);
    }
    rec(&order, 0, 0.0, need, &mut chosen, &mut out);
    out
}

/// Best schedule among the online policies, used to bound the search.
fn incumbent(inst: &IlpInstance) -> Result<(f64, DeltaSchedule)> {
    let mut best = (inst.recompute_cost(), DeltaSchedule::new());
    for kind in PolicyKind::ALL {
        let seeds = if kind == PolicyKind::Lru {
            1
        } else {
            INCUMBENT_SEEDS
        };
        for seed in 0..seeds {
            let r = cache::simulate(
                &inst.plan,
                &inst.dag,
                kind.build(seed).as_mut(),
                inst.capacity,
            )?;
            let schedule = DeltaSchedule::from_trace(&r.trace);
            if let Some(cost) = validate_delta(inst, &schedule).cost {
                if cost < best.0 {
                    best = (cost, schedule);
                }
            }
        }
    }
    Ok(best)
}

pub fn solve_exact_with(inst: &IlpInstance, opts: &SolveOptions) -> Result<OptResult> {
    let start = Instant::now();
    let deadline = opts.time_limit.map(|d| start + d);
    let n = inst.nodes.len();
    let t_max = inst.steps();
    let tab = tables(inst);
    let (ub, fallback) = incumbent(inst)?;
    let tol = 1e-9 * ub.abs().max(1.0);
    let sizes: Vec<f64> = (0..n).map(|v| inst.node_size(v)).collect();

    let mut layers: Vec<Vec<Entry>> = Vec::with_capacity(t_max + 1);
    layers.push(vec![Entry {
        state: bits_new(n),
        cost: 0.0,
        parent: 0,
        admit: false,
        evict: Box::new([]),
    }]);
    let mut explored = 0u64;
    let mut beam = false;
    for t in 0..t_max {
        let v = inst.step_node(t);
        let cost_t = inst.cost(t);
        let size_t = sizes[v];
        let admissible = tab.last_active[v] > t && size_t <= inst.capacity;
        let mut next: Vec<Entry> = Vec::new();
        let mut lookup: HashMap<Bits, usize> = HashMap::new();
        let mut push = |state: Bits,
                        cost: f64,
                        parent: usize,
                        admit: bool,
                        evict: Box<[u32]>,
                        next: &mut Vec<Entry>| {
            let mut canon = state;
            for (w, live) in canon.iter_mut().zip(tab.live[t + 1].iter()) {
                *w &= live;
            }
            if cost + lower_bound(inst, &tab, t + 1, &canon) > ub + tol {
                return;
            }
            match lookup.get(&canon) {
                Some(&i) if next[i].cost <= cost => {}
                Some(&i) => {
                    next[i] = Entry {
                        state: canon,
                        cost,
                        parent: parent as u32,
                        admit,
                        evict,
                    }
                }
                None => {
                    lookup.insert(canon.clone(), next.len());
                    next.push(Entry {
                        state: canon,
                        cost,
                        parent: parent as u32,
                        admit,
                        evict,
                    });
                }
            }
        };
        for (pi, entry) in layers[t].iter().enumerate() {
            explored += 1;
            if !beam
                && explored.is_multiple_of(4096)
                && deadline.is_some_and(|d| Instant::now() >= d)
            {
                beam = true;
            }
            let hit = intersects(&tab.active[t], &entry.state);
            let cost = entry.cost + if hit { 0.0 } else { cost_t };
            push(
                entry.state.clone(),
                cost,
                pi,
                false,
                Box::new([]),
                &mut next,
            );
            if !admissible || bit(&entry.state, v) {
                continue;
            }
            let residents: Vec<(usize, f64)> =
                members(&entry.state).map(|j| (j, sizes[j])).collect();
            let used: f64 = residents.iter().map(|r| r.1).sum();
            if within(used + size_t, inst.capacity) {
                let mut s = entry.state.clone();
                set_bit(&mut s, v);
                push(s, cost, pi, true, Box::new([]), &mut next);
            } else {
                let need = used + size_t - inst.capacity;
                for set in minimal_evictions(&residents, need) {
                    let mut s = entry.state.clone();
                    for &j in &set {
                        clear_bit(&mut s, j);
                    }
                    set_bit(&mut s, v);
                    let freed: f64 = members(&s).map(|j| sizes[j]).sum();
                    if !within(freed, inst.capacity) {
                        continue;
                    }
                    push(
                        s,
                        cost,
                        pi,
                        true,
                        set.iter().map(|&j| j as u32).collect(),
                        &mut next,
                    );
                }
            }
        }
        if !beam && deadline.is_some_and(|d| Instant::now() >= d) {
            beam = true;
        }
        if beam && next.len() > opts.beam_width {
            let mut order: Vec<(f64, usize)> = next
                .iter()
                .enumerate()
                .map(|(i, e)| (e.cost + lower_bound(inst, &tab, t + 1, &e.state), i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.truncate(opts.beam_width);
            order.sort_by_key(|o| o.1);
            let mut keep = vec![false; next.len()];
            for o in &order {
                keep[o.1] = true;
            }
            let mut i = 0;
            next.retain(|_| {
                i += 1;
                keep[i - 1]
            });
        }
        if next.is_empty() {
            break;
        }
        layers.push(next);
    }

    let found = (layers.len() == t_max + 1)
        .then(|| {
            layers[t_max]
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost).then(a.0.cmp(&b.0)))
                .map(|(i, e)| (i, e.cost))
        })
        .flatten();
    let (optimal_cost, schedule) = match found {
        Some((idx, cost)) if cost <= ub => (cost, reconstruct(inst, &layers, idx)),
        _ => (ub, fallback),
    };
    Ok(OptResult {
        optimal_cost,
        schedule,
        proved_optimal: !beam,
        explored_states: explored,
        wall_time: start.elapsed(),
    })
}

fn reconstruct(inst: &IlpInstance, layers: &[Vec<Entry>], last: usize) -> DeltaSchedule {
    let t_max = inst.steps();
    let mut per_step: Vec<Vec<DeltaEntry>> = vec![Vec::new(); t_max];
    let mut idx = last;
    for t in (0..t_max).rev() {
        let entry = &layers[t + 1][idx];
        let parent = &layers[t][entry.parent as usize];
        let v = inst.step_node(t);
        let mut raw = parent.state.clone();
        for &j in entry.evict.iter() {
            clear_bit(&mut raw, j as usize);
            per_step[t].push(DeltaEntry {
                step: t,
                node: inst.nodes[j as usize],
                delta: -1.0,
            });
        }
        if entry.admit {
            set_bit(&mut raw, v);
            per_step[t].push(DeltaEntry {
                step: t,
                node: inst.nodes[v],
                delta: 1.0,
            });
        }
        // Dead residents dropped by canonicalization leave at the next step.
        if t + 1 < t_max {
            for j in members(&raw) {
                if !bit(&entry.state, j) {
                    per_step[t + 1].insert(
                        0,
                        DeltaEntry {
                            step: t + 1,
                            node: inst.nodes[j],
                            delta: -1.0,
                        },
                    );
                }
            }
        }
        idx = entry.parent as usize;
    }
    DeltaSchedule {
        entries: per_step.into_iter().flatten().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpVar {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub integer: bool,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpRow {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// The integer program with `max(0, 1 - X_t A_t)` linearized through `z_t`.
///
/// Variables, with `v` the DAG node id and `t` the 0-based step:
/// `x_v_t` cache state before step `t` (binary), `d_v_t` change applied at
/// step `t` (integer, in `[0, 1]` for the active node and `[-1, 0]`
/// otherwise), `z_t` recompute indicator (continuous, non-negative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpModel {
    pub variables: Vec<MilpVar>,
    pub constraints: Vec<MilpRow>,
}

impl MilpModel {
    pub fn var(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.variables
            .iter()
            .filter(|v| v.name.starts_with(prefix))
            .count()
    }

    /// Objective of `values`, or a description of the first violated bound
    /// or row.
    pub fn evaluate(&self, values: &[f64]) -> std::result::Result<f64, String> {
        const TOL: f64 = 1e-6;
        if values.len() != self.variables.len() {
            return Err(format!(
                "{} values for {} variables",
                values.len(),
                self.variables.len()
            ));
        }
        for (v, &x) in self.variables.iter().zip(values) {
            if x < v.lower - TOL || x > v.upper + TOL {
                return Err(format!(
                    "{} = {x} outside [{}, {}]",
                    v.name, v.lower, v.upper
                ));
            }
            if v.integer && (x - x.round()).abs() > TOL {
                return Err(format!("{} = {x} is not integral", v.name));
            }
        }
        for row in &self.constraints {
            let lhs: f64 = row.terms.iter().map(|&(i, a)| a * values[i]).sum();
            let ok = match row.sense {
                Sense::Le => lhs <= row.rhs + TOL,
                Sense::Ge => lhs >= row.rhs - TOL,
                Sense::Eq => (lhs - row.rhs).abs() <= TOL,
            };
            if !ok {
                return Err(format!("row {} violated: {lhs} vs {}", row.name, row.rhs));
            }
        }
        Ok(self
            .variables
            .iter()
            .zip(values)
            .map(|(v, x)| v.objective * x)
            .sum())
    }

    /// CPLEX LP text.
    pub fn to_lp(&self) -> String {
        let mut out = String::new();
        out.push_str("\\ optimal caching of an execution plan\n");
        out.push_str("Minimize\n obj:");
        let objective: Vec<(usize, f64)> = self
            .variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.objective != 0.0)
            .map(|(i, v)| (i, v.objective))
            .collect();
        if objective.is_empty() {
            write_terms(&mut out, self, &[(0, 0.0)]);
        } else {
            write_terms(&mut out, self, &objective);
        }
        out.push_str("\nSubject To\n");
        for row in &self.constraints {
            let _ = write!(out, " {}:", row.name);
            write_terms(&mut out, self, &row.terms);
            let op = match row.sense {
                Sense::Le => "<=",
                Sense::Ge => ">=",
                Sense::Eq => "=",
            };
            let _ = writeln!(out, " {op} {}", row.rhs);
        }
        out.push_str("Bounds\n");
        for v in &self.variables {
            let _ = writeln!(out, " {} <= {} <= {}", v.lower, v.name, upper_text(v.upper));
        }
        out.push_str("General\n");
        for v in self.variables.iter().filter(|v| v.integer) {
            let _ = writeln!(out, " {}", v.name);
        }
        out.push_str("End\n");
        out
    }
}

fn upper_text(u: f64) -> String {
    if u.is_infinite() {
        "+inf".into()
    } else {
        u.to_string()
    }
}

fn write_terms(out: &mut String, model: &MilpModel, terms: &[(usize, f64)]) {
    for (k, &(i, a)) in terms.iter().enumerate() {
        if k > 0 && k % 8 == 0 {
            out.push_str("\n   ");
        }
        let sign = if a < 0.0 { '-' } else { '+' };
        let mag = a.abs();
        if k == 0 && sign == '+' {
            out.push(' ');
        } else {
            let _ = write!(out, " {sign} ");
        }
        if mag != 1.0 {
            let _ = write!(out, "{mag} ");
        }
        out.push_str(&model.variables[i].name);
    }
}

pub fn milp_model(inst: &IlpInstance) -> MilpModel {
    let n = inst.nodes.len();
    let t_max = inst.steps();
    let mut variables = Vec::with_capacity(2 * n * t_max + t_max);
    let x = |v: usize, t: usize| t * n + v;
    let d = |v: usize, t: usize| n * t_max + t * n + v;
    let z = |t: usize| 2 * n * t_max + t;
    for t in 0..t_max {
        for v in 0..n {
            variables.push(MilpVar {
                name: format!("x_{}_{t}", inst.nodes[v].0),
                lower: 0.0,
                upper: 1.0,
                integer: true,
                objective: 0.0,
            });
        }
    }
    for t in 0..t_max {
        for v in 0..n {
            let active = inst.step_node(t) == v;
            variables.push(MilpVar {
                name: format!("d_{}_{t}", inst.nodes[v].0),
                lower: if active { 0.0 } else { -1.0 },
                upper: if active { 1.0 } else { 0.0 },
                integer: true,
                objective: 0.0,
            });
        }
    }
    for t in 0..t_max {
        variables.push(MilpVar {
            name: format!("z_{t}"),
            lower: 0.0,
            upper: f64::INFINITY,
            integer: false,
            objective: inst.cost(t),
        });
    }
    let sizes: Vec<f64> = (0..n).map(|v| inst.node_size(v)).collect();
    let mut constraints = Vec::new();
    for t in 0..t_max {
        let mut terms = vec![(z(t), 1.0)];
        terms.extend(inst.active(t).iter().map(|&j| (x(j, t), 1.0)));
        constraints.push(MilpRow {
            name: format!("cover_{t}"),
            terms,
            sense: Sense::Ge,
            rhs: 1.0,
        });
    }
    for v in 0..n {
        constraints.push(MilpRow {
            name: format!("init_{}", inst.nodes[v].0),
            terms: vec![(x(v, 0), 1.0)],
            sense: Sense::Eq,
            rhs: 0.0,
        });
    }
    for t in 0..t_max.saturating_sub(1) {
        for v in 0..n {
            constraints.push(MilpRow {
                name: format!("state_{}_{t}", inst.nodes[v].0),
                terms: vec![(x(v, t + 1), 1.0), (x(v, t), -1.0), (d(v, t), -1.0)],
                sense: Sense::Eq,
                rhs: 0.0,
            });
        }
    }
    for t in 1..t_max {
        let terms: Vec<(usize, f64)> = (0..n)
            .filter(|&v| sizes[v] != 0.0)
            .map(|v| (x(v, t), sizes[v]))
            .collect();
        if !terms.is_empty() {
            constraints.push(MilpRow {
                name: format!("cap_{t}"),
                terms,
                sense: Sense::Le,
                rhs: inst.capacity,
            });
        }
    }
    if t_max > 0 {
        let last = t_max - 1;
        let terms: Vec<(usize, f64)> = (0..n)
            .filter(|&v| sizes[v] != 0.0)
            .flat_map(|v| [(x(v, last), sizes[v]), (d(v, last), sizes[v])])
            .collect();
        if !terms.is_empty() {
            constraints.push(MilpRow {
                name: "cap_final".into(),
                terms,
                sense: Sense::Le,
                rhs: inst.capacity,
            });
        }
        for v in 0..n {
            for (sense, rhs, tag) in [(Sense::Le, 1.0, "hi"), (Sense::Ge, 0.0, "lo")] {
                constraints.push(MilpRow {
                    name: format!("final_{tag}_{}", inst.nodes[v].0),
                    terms: vec![(x(v, last), 1.0), (d(v, last), 1.0)],
                    sense,
                    rhs,
                });
            }
        }
    }
    MilpModel {
        variables,
        constraints,
    }
}

/// The integer program as CPLEX LP text; see [`MilpModel`] for naming.
pub fn export_milp(inst: &IlpInstance) -> String {
    milp_model(inst).to_lp()
}

/// Variable assignment realizing `schedule` in `model`, with `z_t` at its
/// tightest value.
pub fn milp_assignment(inst: &IlpInstance, schedule: &DeltaSchedule) -> Vec<f64> {
    let n = inst.nodes.len();
    let t_max = inst.steps();
    let mut values = vec![0.0; 2 * n * t_max + t_max];
    let mut delta = vec![0.0; n * t_max];
    for e in &schedule.entries {
        if let Some(v) = inst.index_of(e.node) {
            if e.step < t_max {
                delta[e.step * n + v] += e.delta;
            }
        }
    }
    let mut x = vec![0.0; n];
    for t in 0..t_max {
        for v in 0..n {
            values[t * n + v] = x[v];
            values[n * t_max + t * n + v] = delta[t * n + v];
        }
        let covered: f64 = inst.active(t).iter().map(|&j| x[j]).sum();
        values[2 * n * t_max + t] = (1.0 - covered).max(0.0);
        for v in 0..n {
            x[v] += delta[t * n + v];
        }
    }
    values
}
