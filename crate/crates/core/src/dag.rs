//! Pipeline configurations as DAGs.
//!
//! A [`PipelineSpec`] is an ordered list of operator signatures. Merging a
//! batch of them collapses every pair of nodes that share both their ancestor
//! chain and their signature, so each distinct intermediate result appears
//! once. The resulting [`Dag`] carries per-node cost (time) and size (memory)
//! annotations and can be linearized into an [`ExecutionPlan`], the step
//! sequence the cache simulator and the exact optimizer both consume.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Label(String),
}

impl ParamValue {
    /// Textual form used for signature equality. Floats use the shortest
    /// representation that round-trips, so two floats render equal iff they
    /// are bit-identical (modulo the sign of zero and NaN payloads).
    pub fn canonical(&self) -> String {
        match self {
            ParamValue::Bool(b) => b.to_string(),
            ParamValue::Int(i) => i.to_string(),
            ParamValue::Float(x) => format!("{x:?}"),
            ParamValue::Label(s) => format!("{s:?}"),
        }
    }
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        ParamValue::Bool(v)
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Int(v)
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Float(v)
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Label(v.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct RawSignature {
    operator: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, ParamValue>,
}

/// Operator name plus its hyperparameter assignment.
///
/// Equality, hashing and ordering all go through the canonical rendering, e.g.
/// `B(p=2)` or `PCA(variance=0.75,whiten=true)`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(from = "RawSignature", into = "RawSignature")]
pub struct OpSignature {
    operator: String,
    params: BTreeMap<String, ParamValue>,
    canonical: String,
}

impl OpSignature {
    pub fn new(operator: impl Into<String>, params: BTreeMap<String, ParamValue>) -> Self {
        let operator = operator.into();
        let canonical = if params.is_empty() {
            operator.clone()
        } else {
            let rendered: Vec<String> = params
                .iter()
                .map(|(k, v)| format!("{k}={}", v.canonical()))
                .collect();
            format!("{operator}({})", rendered.join(","))
        };
        OpSignature {
            operator,
            params,
            canonical,
        }
    }

    /// Signature without parameters.
    pub fn bare(operator: impl Into<String>) -> Self {
        Self::new(operator, BTreeMap::new())
    }

    /// Signature with a single parameter.
    pub fn with_param(
        operator: impl Into<String>,
        name: impl Into<String>,
        value: impl Into<ParamValue>,
    ) -> Self {
        let mut params = BTreeMap::new();
        params.insert(name.into(), value.into());
        Self::new(operator, params)
    }

    pub fn operator(&self) -> &str {
        &self.operator
    }

    pub fn params(&self) -> &BTreeMap<String, ParamValue> {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.params.get(name)
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }
}

impl From<RawSignature> for OpSignature {
    fn from(raw: RawSignature) -> Self {
        OpSignature::new(raw.operator, raw.params)
    }
}

impl From<OpSignature> for RawSignature {
    fn from(sig: OpSignature) -> Self {
        RawSignature {
            operator: sig.operator,
            params: sig.params,
        }
    }
}

impl PartialEq for OpSignature {
    fn eq(&self, other: &Self) -> bool {
        self.canonical == other.canonical
    }
}

impl Eq for OpSignature {}

impl Hash for OpSignature {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.canonical.hash(state);
    }
}

impl PartialOrd for OpSignature {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OpSignature {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.canonical.cmp(&other.canonical)
    }
}

impl fmt::Debug for OpSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.canonical)
    }
}

impl fmt::Display for OpSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

/// One pipeline configuration, stages in data-flow order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub stages: Vec<OpSignature>,
}

impl PipelineSpec {
    pub fn new(stages: Vec<OpSignature>) -> Self {
        PipelineSpec { stages }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub signature: OpSignature,
    /// Time to compute this node from its parent's output.
    pub cost: f64,
    /// Memory needed to cache this node's output.
    pub size: f64,
}

/// Incremental constructor for [`Dag`]; validation happens in [`DagBuilder::build`].
#[derive(Debug, Default, Clone)]
pub struct DagBuilder {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
}

impl DagBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, signature: OpSignature, cost: f64, size: f64) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            id,
            signature,
            cost,
            size,
        });
        id
    }

    pub fn add_edge(&mut self, parent: NodeId, child: NodeId) {
        self.edges.push((parent, child));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Validates and freezes the graph. `synthetic_root` marks the root as the
    /// raw-input placeholder, which is left out of execution plans.
    pub fn build(self, root: NodeId, synthetic_root: bool) -> Result<Dag> {
        let n = self.nodes.len();
        if root.index() >= n {
            return Err(Error::structural(format!("root {root} does not exist")));
        }
        for node in &self.nodes {
            if !(node.cost >= 0.0) || !node.cost.is_finite() {
                return Err(Error::structural(format!(
                    "node {} has invalid cost {}",
                    node.id, node.cost
                )));
            }
            if !(node.size >= 0.0) || !node.size.is_finite() {
                return Err(Error::structural(format!(
                    "node {} has invalid size {}",
                    node.id, node.size
                )));
            }
        }
        let mut children = vec![Vec::new(); n];
        let mut parents = vec![Vec::new(); n];
        let mut seen = HashSet::new();
        for &(p, c) in &self.edges {
            if p.index() >= n || c.index() >= n {
                return Err(Error::structural(format!(
                    "edge {p}->{c} references a missing node"
                )));
            }
            if p == c {
                return Err(Error::structural(format!("self loop on {p}")));
            }
            if seen.insert((p, c)) {
                children[p.index()].push(c);
                parents[c.index()].push(p);
            }
        }
        if !parents[root.index()].is_empty() {
            return Err(Error::structural(format!("root {root} has parents")));
        }
        for list in children.iter_mut() {
            list.sort_by(|a, b| {
                self.nodes[a.index()]
                    .signature
                    .cmp(&self.nodes[b.index()].signature)
                    .then(a.cmp(b))
            });
        }
        for list in parents.iter_mut() {
            list.sort();
        }

        // Kahn's algorithm doubles as the acyclicity check.
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut queue: Vec<NodeId> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(|i| NodeId(i as u32))
            .collect();
        let mut visited = 0;
        while let Some(v) = queue.pop() {
            visited += 1;
            for &c in &children[v.index()] {
                indegree[c.index()] -= 1;
                if indegree[c.index()] == 0 {
                    queue.push(c);
                }
            }
        }
        if visited != n {
            return Err(Error::structural("graph contains a cycle"));
        }

        let mut reachable = vec![false; n];
        let mut stack = vec![root];
        reachable[root.index()] = true;
        while let Some(v) = stack.pop() {
            for &c in &children[v.index()] {
                if !reachable[c.index()] {
                    reachable[c.index()] = true;
                    stack.push(c);
                }
            }
        }
        if let Some(i) = reachable.iter().position(|r| !r) {
            return Err(Error::structural(format!(
                "node {} is not reachable from the root",
                NodeId(i as u32)
            )));
        }

        Ok(Dag {
            nodes: self.nodes,
            children,
            parents,
            root,
            synthetic_root,
        })
    }
}

/// An annotated, validated pipeline DAG with a single root.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    nodes: Vec<Node>,
    children: Vec<Vec<NodeId>>,
    parents: Vec<Vec<NodeId>>,
    root: NodeId,
    synthetic_root: bool,
}

impl Dag {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn has_synthetic_root(&self) -> bool {
        self.synthetic_root
    }

    /// Nodes that take part in execution: everything but a synthetic root.
    pub fn operator_nodes(&self) -> impl Iterator<Item = &Node> {
        let skip = self.synthetic_root.then_some(self.root);
        self.nodes.iter().filter(move |n| Some(n.id) != skip)
    }

    pub fn operator_count(&self) -> usize {
        self.nodes.len() - usize::from(self.synthetic_root)
    }

    /// Children sorted by ascending canonical signature.
    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.index()]
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.parents[id.index()]
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.children
            .iter()
            .enumerate()
            .flat_map(|(p, cs)| cs.iter().map(move |&c| (NodeId(p as u32), c)))
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn sinks(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .map(|n| n.id)
            .filter(|&id| self.children[id.index()].is_empty())
            .collect()
    }

    pub fn is_sink(&self, id: NodeId) -> bool {
        self.children[id.index()].is_empty()
    }

    pub fn is_tree(&self) -> bool {
        self.parents.iter().all(|p| p.len() <= 1)
    }

    /// True when no two siblings carry equal signatures.
    pub fn is_merged(&self) -> bool {
        self.children.iter().all(|cs| {
            cs.windows(2)
                .all(|w| self.node(w[0]).signature != self.node(w[1]).signature)
        })
    }

    /// Every root-to-sink path in depth-first order, children visited by
    /// ascending canonical signature. Paths include the root.
    pub fn paths(&self) -> Vec<Vec<NodeId>> {
        let mut out = Vec::new();
        let mut path = vec![self.root];
        self.collect_paths(&mut path, &mut out);
        out
    }

    fn collect_paths(&self, path: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        let last = *path.last().expect("path never empty");
        let children = &self.children[last.index()];
        if children.is_empty() {
            out.push(path.clone());
            return;
        }
        for &c in children {
            path.push(c);
            self.collect_paths(path, out);
            path.pop();
        }
    }

    /// Root-to-sink paths recovered as pipeline specs (synthetic root dropped).
    pub fn pipelines(&self) -> Vec<PipelineSpec> {
        self.plan_paths()
            .into_iter()
            .map(|p| {
                PipelineSpec::new(
                    p.iter()
                        .map(|&id| self.node(id).signature.clone())
                        .collect(),
                )
            })
            .collect()
    }

    fn plan_paths(&self) -> Vec<Vec<NodeId>> {
        let skip = usize::from(self.synthetic_root);
        self.paths()
            .into_iter()
            .map(|p| p[skip..].to_vec())
            .filter(|p| !p.is_empty())
            .collect()
    }

    /// Node count per depth (shortest distance from the root), root level first.
    pub fn level_sizes(&self) -> Vec<usize> {
        let depth = self.depths();
        let max = depth.iter().copied().max().unwrap_or(0);
        let mut sizes = vec![0; max + 1];
        for d in depth {
            sizes[d] += 1;
        }
        sizes
    }

    /// Shortest distance from the root for every node.
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![usize::MAX; self.nodes.len()];
        let mut frontier = vec![self.root];
        depth[self.root.index()] = 0;
        let mut level = 0;
        while !frontier.is_empty() {
            level += 1;
            let mut next = Vec::new();
            for v in frontier {
                for &c in &self.children[v.index()] {
                    if depth[c.index()] == usize::MAX {
                        depth[c.index()] = level;
                        next.push(c);
                    }
                }
            }
            frontier = next;
        }
        depth
    }

    /// TP(P_merged): every distinct node computed once.
    pub fn total_cost_merged(&self) -> f64 {
        self.nodes.iter().map(|n| n.cost).sum()
    }

    /// TP(P) computed from the DAG: each root-to-sink path evaluated on its
    /// own, shared prefixes counted once per path.
    pub fn total_cost_independent(&self) -> f64 {
        self.paths()
            .iter()
            .map(|p| p.iter().map(|&id| self.node(id).cost).sum::<f64>())
            .sum()
    }

    pub fn speedup(&self) -> Result<f64> {
        let merged = self.total_cost_merged();
        if merged <= 0.0 {
            return Err(Error::UndefinedRatio);
        }
        Ok(self.total_cost_independent() / merged)
    }

    pub fn total_size(&self) -> f64 {
        self.nodes.iter().map(|n| n.size).sum()
    }

    /// Returns a copy with every node's `(cost, size)` replaced by
    /// `annotate(node, depth)`.
    pub fn annotated<F>(&self, mut annotate: F) -> Result<Dag>
    where
        F: FnMut(&Node, usize) -> Result<(f64, f64)>,
    {
        let depths = self.depths();
        let mut builder = DagBuilder::new();
        for node in &self.nodes {
            let (cost, size) = annotate(node, depths[node.id.index()])?;
            builder.add_node(node.signature.clone(), cost, size);
        }
        for (p, c) in self.edges() {
            builder.add_edge(p, c);
        }
        builder.build(self.root, self.synthetic_root)
    }
}

/// Outcome of [`merge_pipelines`].
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub dag: Dag,
    /// Input pipelines that repeated an earlier pipeline exactly and were dropped.
    pub duplicates: usize,
}

fn root_signature() -> OpSignature {
    OpSignature::bare("<data>")
}

/// Merges pipelines into a prefix-sharing DAG rooted at a synthetic
/// zero-cost data node. Every node gets cost 0 and size 0; use
/// [`merge_pipelines_with`] or [`Dag::annotated`] to attach a profile.
pub fn merge_pipelines(pipelines: &[PipelineSpec]) -> Result<MergeOutcome> {
    merge_pipelines_with(pipelines, |_, _| Ok((0.0, 0.0)))
}

/// As [`merge_pipelines`], with `annotate(signature, depth)` supplying each
/// new node's `(cost, size)`. Depth 1 is the first stage.
pub fn merge_pipelines_with<F>(pipelines: &[PipelineSpec], mut annotate: F) -> Result<MergeOutcome>
where
    F: FnMut(&OpSignature, usize) -> Result<(f64, f64)>,
{
    let mut builder = DagBuilder::new();
    let root = builder.add_node(root_signature(), 0.0, 0.0);
    let mut index: HashMap<(NodeId, OpSignature), NodeId> = HashMap::new();
    let mut ends: HashSet<NodeId> = HashSet::new();
    let mut has_children: HashSet<NodeId> = HashSet::new();
    let mut duplicates = 0;

    for (i, pipeline) in pipelines.iter().enumerate() {
        if pipeline.is_empty() {
            return Err(Error::config(format!("pipeline {i} has no stages")));
        }
        let mut current = root;
        for (depth, sig) in pipeline.stages.iter().enumerate() {
            let key = (current, sig.clone());
            let next = match index.get(&key) {
                Some(&id) => id,
                None => {
                    let (cost, size) = annotate(sig, depth + 1)?;
                    let id = builder.add_node(sig.clone(), cost, size);
                    builder.add_edge(current, id);
                    index.insert(key, id);
                    id
                }
            };
            has_children.insert(current);
            current = next;
        }
        if !ends.insert(current) {
            duplicates += 1;
        }
    }
    if let Some(end) = ends.iter().find(|e| has_children.contains(e)) {
        return Err(Error::config(format!(
            "a pipeline ending at `{}` is a strict prefix of another pipeline",
            builder.nodes[end.index()].signature
        )));
    }
    let dag = builder.build(root, true)?;
    Ok(MergeOutcome { dag, duplicates })
}

/// Cost of each operator configuration, keyed by signature.
#[derive(Debug, Clone, Default)]
pub struct SignatureCosts {
    costs: HashMap<OpSignature, f64>,
}

impl SignatureCosts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sig: OpSignature, cost: f64) {
        self.costs.insert(sig, cost);
    }

    /// Assigns `cost` to every signature appearing in `pipelines`.
    pub fn uniform(pipelines: &[PipelineSpec], cost: f64) -> Self {
        let mut table = Self::new();
        for sig in pipelines.iter().flat_map(|p| &p.stages) {
            table.insert(sig.clone(), cost);
        }
        table
    }

    pub fn get(&self, sig: &OpSignature) -> Result<f64> {
        self.costs
            .get(sig)
            .copied()
            .ok_or_else(|| Error::config(format!("no cost assigned to `{sig}`")))
    }
}

impl FromIterator<(OpSignature, f64)> for SignatureCosts {
    fn from_iter<I: IntoIterator<Item = (OpSignature, f64)>>(iter: I) -> Self {
        SignatureCosts {
            costs: iter.into_iter().collect(),
        }
    }
}

/// TP(P): every pipeline evaluated from scratch, every occurrence counted.
pub fn total_cost_independent(pipelines: &[PipelineSpec], costs: &SignatureCosts) -> Result<f64> {
    let mut total = 0.0;
    for p in pipelines {
        for sig in &p.stages {
            total += costs.get(sig)?;
        }
    }
    Ok(total)
}

/// TP(P_merged) for a merged DAG.
pub fn total_cost_merged(dag: &Dag) -> f64 {
    dag.total_cost_merged()
}

/// TP(P) / TP(P_merged) with signature-keyed costs.
pub fn speedup(pipelines: &[PipelineSpec], costs: &SignatureCosts) -> Result<f64> {
    let independent = total_cost_independent(pipelines, costs)?;
    let merged = merge_pipelines_with(pipelines, |sig, _| Ok((costs.get(sig)?, 0.0)))?;
    let merged_cost = merged.dag.total_cost_merged();
    if merged_cost <= 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(independent / merged_cost)
}

/// Upper bound on the speedup for `pipelines` distinct pipelines of
/// `stages` unit-cost stages: |V||P| / (|V| + |P| - 1).
pub fn max_speedup_uniform(stages: usize, pipelines: usize) -> f64 {
    assert!(
        stages >= 1 && pipelines >= 1,
        "stage and pipeline counts must be positive"
    );
    let (v, p) = (stages as f64, pipelines as f64);
    v * p / (v + p - 1.0)
}

/// `pipelines` pipelines of `stages` stages that differ only in the last stage,
/// the configuration that attains [`max_speedup_uniform`].
pub fn maximally_redundant(stages: usize, pipelines: usize) -> Vec<PipelineSpec> {
    (0..pipelines)
        .map(|j| {
            let mut sigs: Vec<OpSignature> = (0..stages.saturating_sub(1))
                .map(|s| OpSignature::bare(format!("S{s}")))
                .collect();
            sigs.push(OpSignature::with_param(
                format!("S{}", stages - 1),
                "v",
                j as i64,
            ));
            PipelineSpec::new(sigs)
        })
        .collect()
}

/// One step of an execution plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub node: NodeId,
    /// Index of the path this step belongs to.
    pub path: usize,
    /// Position of the step within its path.
    pub position: usize,
}

/// A sequence of root-to-sink paths, flattened into steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    paths: Vec<Vec<NodeId>>,
    steps: Vec<PlanStep>,
}

impl ExecutionPlan {
    /// Concatenates `paths` into a plan. Each path must be non-empty.
    pub fn from_paths(paths: Vec<Vec<NodeId>>) -> Result<Self> {
        let mut steps = Vec::with_capacity(paths.iter().map(Vec::len).sum());
        for (pi, path) in paths.iter().enumerate() {
            if path.is_empty() {
                return Err(Error::structural(format!("path {pi} is empty")));
            }
            for (pos, &node) in path.iter().enumerate() {
                steps.push(PlanStep {
                    node,
                    path: pi,
                    position: pos,
                });
            }
        }
        Ok(ExecutionPlan { paths, steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    pub fn paths(&self) -> &[Vec<NodeId>] {
        &self.paths
    }

    pub fn node_at(&self, t: usize) -> NodeId {
        self.steps[t].node
    }

    /// Column A_t: the step's node and its successors along the active path.
    pub fn active_set(&self, t: usize) -> Result<&[NodeId]> {
        let step = self.steps.get(t).ok_or(Error::OutOfRange {
            index: t,
            len: self.steps.len(),
        })?;
        Ok(&self.paths[step.path][step.position..])
    }

    /// Distinct nodes in order of first appearance.
    pub fn distinct_nodes(&self) -> Vec<NodeId> {
        let mut seen = HashSet::new();
        self.steps
            .iter()
            .filter(|s| seen.insert(s.node))
            .map(|s| s.node)
            .collect()
    }

    /// Edges traversed by the plan's paths, with multiplicity.
    pub fn traversed_edges(&self) -> Vec<(NodeId, NodeId)> {
        self.paths
            .iter()
            .flat_map(|p| p.windows(2).map(|w| (w[0], w[1])))
            .collect()
    }

    /// Edges traversed for the first time, in plan order. Each DAG edge
    /// between plan nodes appears here exactly once.
    pub fn first_traversals(&self) -> Vec<(NodeId, NodeId)> {
        let mut seen = HashSet::new();
        self.traversed_edges()
            .into_iter()
            .filter(|e| seen.insert(*e))
            .collect()
    }
}

/// Depth-first plan over a DAG: one full path per root-to-sink path, prefix
/// nodes repeated, the synthetic root left out.
pub fn execution_plan(dag: &Dag) -> Result<ExecutionPlan> {
    let paths = dag.plan_paths();
    if paths.is_empty() {
        return Err(Error::structural("DAG has no operator sink"));
    }
    ExecutionPlan::from_paths(paths)
}

/// The active set of step `t`; see [`ExecutionPlan::active_set`].
pub fn active_set(plan: &ExecutionPlan, t: usize) -> Result<&[NodeId]> {
    plan.active_set(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(op: &str, p: i64) -> OpSignature {
        OpSignature::with_param(op, "p", p)
    }

    pub(crate) fn toy() -> Vec<PipelineSpec> {
        let a = OpSignature::with_param("A", "p", 0.1);
        vec![
            PipelineSpec::new(vec![a.clone(), sig("B", 2), sig("C", 10)]),
            PipelineSpec::new(vec![a.clone(), sig("B", 2), sig("C", 5)]),
            PipelineSpec::new(vec![a, sig("B", 4), sig("C", 8)]),
        ]
    }

    fn disjoint() -> Vec<PipelineSpec> {
        (0..3)
            .map(|i| PipelineSpec::new(vec![sig("A", i), sig("B", 0), sig("C", 0)]))
            .collect()
    }

    #[test]
    fn canonical_rendering() {
        assert_eq!(
            OpSignature::with_param("A", "p", 0.1).canonical(),
            "A(p=0.1)"
        );
        assert_eq!(sig("B", 2).canonical(), "B(p=2)");
        assert_eq!(OpSignature::bare("none").canonical(), "none");
        // Integers and floats with the same magnitude are different settings.
        assert_ne!(sig("B", 2), OpSignature::with_param("B", "p", 2.0));
        assert_eq!(
            OpSignature::with_param("A", "p", 0.1 + 0.2),
            OpSignature::with_param("A", "p", 0.30000000000000004)
        );
        assert_ne!(
            OpSignature::with_param("A", "p", 0.1 + 0.2),
            OpSignature::with_param("A", "p", 0.3)
        );
    }

    #[test]
    fn signature_json_round_trip() {
        let s = OpSignature::new(
            "PCA",
            [
                ("variance".to_string(), ParamValue::Float(0.75)),
                ("whiten".to_string(), ParamValue::Bool(true)),
                ("k".to_string(), ParamValue::Int(10)),
                ("dist".to_string(), ParamValue::Label("Cauchy".into())),
            ]
            .into_iter()
            .collect(),
        );
        let json = serde_json::to_string(&s).unwrap();
        let back: OpSignature = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.canonical(), s.canonical());
    }

    #[test]
    fn toy_merge() {
        let out = merge_pipelines(&toy()).unwrap();
        let dag = out.dag;
        assert_eq!(out.duplicates, 0);
        assert_eq!(dag.operator_count(), 6);
        assert_eq!(dag.level_sizes(), vec![1, 1, 2, 3]);
        assert!(dag.is_merged());
        assert_eq!(dag.pipelines().len(), 3);
    }

    #[test]
    fn single_pipeline_is_chain() {
        let p = vec![toy()[0].clone()];
        let dag = merge_pipelines(&p).unwrap().dag;
        assert_eq!(dag.len(), 4);
        assert_eq!(dag.paths().len(), 1);
    }

    #[test]
    fn disjoint_merge_keeps_all_nodes() {
        let dag = merge_pipelines(&disjoint()).unwrap().dag;
        assert_eq!(dag.operator_count(), 9);
    }

    #[test]
    fn duplicates_are_counted() {
        let mut ps = toy();
        ps.push(ps[0].clone());
        let out = merge_pipelines(&ps).unwrap();
        assert_eq!(out.duplicates, 1);
        assert_eq!(out.dag.pipelines().len(), 3);
    }

    #[test]
    fn strict_prefix_is_rejected() {
        let ps = vec![
            PipelineSpec::new(vec![sig("A", 1)]),
            PipelineSpec::new(vec![sig("A", 1), sig("B", 1)]),
        ];
        assert!(matches!(merge_pipelines(&ps), Err(Error::Config(_))));
        assert!(merge_pipelines(&[PipelineSpec::new(vec![])]).is_err());
    }

    #[test]
    fn cost_sums() {
        let ps = toy();
        let unit = SignatureCosts::uniform(&ps, 1.0);
        assert_eq!(total_cost_independent(&ps, &unit).unwrap(), 9.0);
        assert_eq!(total_cost_independent(&[], &unit).unwrap(), 0.0);
        let merged = merge_pipelines_with(&ps, |_, _| Ok((1.0, 1.0)))
            .unwrap()
            .dag;
        assert_eq!(total_cost_merged(&merged), 6.0);
        assert_eq!(merged.total_cost_independent(), 9.0);
        assert_eq!(speedup(&ps, &unit).unwrap(), 1.5);

        let chain = vec![PipelineSpec::new(vec![
            sig("A", 0),
            sig("B", 0),
            sig("C", 0),
        ])];
        let costs: SignatureCosts = chain[0]
            .stages
            .iter()
            .cloned()
            .zip([1.0, 2.0, 3.0])
            .collect();
        assert_eq!(total_cost_independent(&chain, &costs).unwrap(), 6.0);

        let d = disjoint();
        let unit = SignatureCosts::uniform(&d, 1.0);
        assert_eq!(speedup(&d, &unit).unwrap(), 1.0);
    }

    #[test]
    fn missing_cost_names_signature() {
        let ps = toy();
        let mut costs = SignatureCosts::uniform(&ps, 1.0);
        costs.costs.remove(&sig("C", 5));
        let err = total_cost_independent(&ps, &costs).unwrap_err();
        assert!(err.to_string().contains("C(p=5)"), "{err}");
    }

    #[test]
    fn zero_cost_speedup_is_undefined() {
        let ps = toy();
        let zero = SignatureCosts::uniform(&ps, 0.0);
        assert!(matches!(speedup(&ps, &zero), Err(Error::UndefinedRatio)));
    }

    #[test]
    fn max_speedup_values() {
        assert_eq!(max_speedup_uniform(3, 3), 9.0 / 5.0);
        assert_eq!(max_speedup_uniform(7, 1), 1.0);
        assert_eq!(max_speedup_uniform(1, 9), 1.0);
        let ps = maximally_redundant(3, 3);
        let unit = SignatureCosts::uniform(&ps, 1.0);
        assert_eq!(speedup(&ps, &unit).unwrap(), 1.8);
    }

    #[test]
    fn toy_plan_matches_depth_first_order() {
        let dag = merge_pipelines(&toy()).unwrap().dag;
        let plan = execution_plan(&dag).unwrap();
        assert_eq!(plan.len(), 9);
        let rendered: Vec<Vec<String>> = plan
            .paths()
            .iter()
            .map(|p| {
                p.iter()
                    .map(|&id| dag.node(id).signature.to_string())
                    .collect()
            })
            .collect();
        assert_eq!(
            rendered,
            vec![
                vec!["A(p=0.1)", "B(p=2)", "C(p=10)"],
                vec!["A(p=0.1)", "B(p=2)", "C(p=5)"],
                vec!["A(p=0.1)", "B(p=4)", "C(p=8)"],
            ]
        );
        let first: Vec<&str> = plan
            .active_set(0)
            .unwrap()
            .iter()
            .map(|&id| dag.node(id).signature.canonical())
            .collect();
        assert_eq!(first, vec!["A(p=0.1)", "B(p=2)", "C(p=10)"]);
        assert_eq!(plan.active_set(2).unwrap(), &[plan.node_at(2)]);
        assert!(matches!(plan.active_set(9), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn chain_plan_active_set() {
        let p = vec![PipelineSpec::new(vec![
            sig("A", 0),
            sig("B", 0),
            sig("C", 0),
            sig("D", 0),
        ])];
        let dag = merge_pipelines(&p).unwrap().dag;
        let plan = execution_plan(&dag).unwrap();
        assert_eq!(plan.len(), 4);
        assert_eq!(plan.active_set(0).unwrap().len(), 4);
    }

    #[test]
    fn empty_dag_has_no_plan() {
        let mut b = DagBuilder::new();
        let root = b.add_node(root_signature(), 0.0, 0.0);
        let dag = b.build(root, true).unwrap();
        assert!(matches!(execution_plan(&dag), Err(Error::Structural(_))));
    }

    #[test]
    fn builder_rejects_bad_graphs() {
        let mut b = DagBuilder::new();
        let r = b.add_node(sig("R", 0), 0.0, 0.0);
        let a = b.add_node(sig("A", 0), 1.0, 1.0);
        let c = b.add_node(sig("C", 0), 1.0, 1.0);
        b.add_edge(r, a);
        b.add_edge(a, c);
        b.add_edge(c, a);
        assert!(b.build(r, false).is_err());

        let mut b = DagBuilder::new();
        let r = b.add_node(sig("R", 0), 0.0, 0.0);
        b.add_node(sig("A", 0), 1.0, 1.0);
        assert!(b
            .build(r, false)
            .unwrap_err()
            .to_string()
            .contains("not reachable"));

        let mut b = DagBuilder::new();
        let r = b.add_node(sig("R", 0), -1.0, 0.0);
        assert!(b.build(r, false).is_err());
    }

    #[test]
    fn plan_covers_edges() {
        let dag = merge_pipelines(&toy()).unwrap().dag;
        let plan = execution_plan(&dag).unwrap();
        let mut expected: Vec<_> = dag.edges().filter(|(p, _)| *p != dag.root()).collect();
        let mut got = plan.first_traversals();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
    }
}
