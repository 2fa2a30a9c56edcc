//! Workloads: generated k-ary trees, profile files and the builtin search
//! spaces.
//!
//! # Profile files
//!
//! A profile is a JSON object:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "metadata": { "time_unit": "s", "memory_unit": "MB", "dataset": "timit" },
//!   "nodes": [
//!     { "id": "load", "operator": "Load", "cost": 12.0, "size": 300.0 },
//!     { "id": "rf", "operator": "RandomFeatures", "params": { "gamma": 0.5 },
//!       "cost": 40.0, "size": 800.0, "parents": ["load"] }
//!   ]
//! }
//! ```
//!
//! `cost` is in `time_unit`, `size` in `memory_unit`. Nodes without parents
//! are sources. A single source becomes the root; several sources hang off a
//! synthetic zero-cost root. A record with `"synthetic": true` marks such a
//! root explicitly.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dag::{Dag, DagBuilder, NodeId, OpSignature, ParamValue, PipelineSpec};
use crate::error::{Error, Result};
use crate::seed;
use crate::space::SearchSpace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CostModel {
    Uniform {
        cost: f64,
    },
    RootHeavy {
        root: f64,
        other: f64,
    },
    /// `hi` with probability `p`, else `lo`.
    TwoPoint {
        lo: f64,
        hi: f64,
        p: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SizeModel {
    Uniform { size: f64 },
    TwoPoint { lo: f64, hi: f64, p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub k: usize,
    pub d: usize,
    pub cost: CostModel,
    pub size: SizeModel,
    /// Draw one coin per node for both two-point models, pairing `lo` with
    /// `lo` and `hi` with `hi`. The size model's `p` is used.
    #[serde(default)]
    pub coupled: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TreeSpec {
    /// Unit costs and sizes.
    pub fn uniform(k: usize, d: usize) -> Self {
        TreeSpec {
            k,
            d,
            cost: CostModel::Uniform { cost: 1.0 },
            size: SizeModel::Uniform { size: 1.0 },
            coupled: false,
            seed: 0,
        }
    }

    /// Sizes 10, root cost 100, every other node cost 1.
    pub fn root_heavy(k: usize, d: usize) -> Self {
        TreeSpec {
            k,
            d,
            cost: CostModel::RootHeavy {
                root: 100.0,
                other: 1.0,
            },
            size: SizeModel::Uniform { size: 10.0 },
            coupled: false,
            seed: 0,
        }
    }

    /// Each node independently small and cheap (size 10, cost 1) or large
    /// and expensive (size 50, cost 100) with equal probability.
    pub fn two_point(k: usize, d: usize, seed: u64) -> Self {
        TreeSpec {
            k,
            d,
            cost: CostModel::TwoPoint {
                lo: 1.0,
                hi: 100.0,
                p: 0.5,
            },
            size: SizeModel::TwoPoint {
                lo: 10.0,
                hi: 50.0,
                p: 0.5,
            },
            coupled: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!(
                "tree branching factor must be at least 2, got {}",
                self.k
            )));
        }
        if self.d < 1 {
            return Err(Error::config("tree depth must be at least 1"));
        }
        let nodes = (self.k as f64).powi(self.d as i32 + 1);
        if nodes > 1e7 {
            return Err(Error::config(format!(
                "tree with k={} d={} is too large",
                self.k, self.d
            )));
        }
        let check = |what: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "tree {what} must be a non-negative number, got {v}"
                )))
            }
        };
        let check_p = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "probability must lie in [0, 1], got {p}"
                )))
            }
        };
        match self.cost {
            CostModel::Uniform { cost } => check("cost", cost)?,
            CostModel::RootHeavy { root, other } => {
                check("cost", root)?;
                check("cost", other)?;
            }
            CostModel::TwoPoint { lo, hi, p } => {
                check("cost", lo)?;
                check("cost", hi)?;
                check_p(p)?;
            }
        }
        match self.size {
            SizeModel::Uniform { size } => check("size", size)?,
            SizeModel::TwoPoint { lo, hi, p } => {
                check("size", lo)?;
                check("size", hi)?;
                check_p(p)?;
            }
        }
        if self.coupled
            && !(matches!(self.cost, CostModel::TwoPoint { .. })
                && matches!(self.size, SizeModel::TwoPoint { .. }))
        {
            return Err(Error::config(
                "coupled draws need two-point cost and size models",
            ));
        }
        Ok(())
    }

    /// Pipelines p = k^d.
    pub fn pipelines(&self) -> usize {
        self.k.pow(self.d as u32)
    }

    /// Nodes including the root.
    pub fn nodes(&self) -> usize {
        (self.k.pow(self.d as u32 + 1) - 1) / (self.k - 1)
    }

    /// Plan length T = p (d + 1).
    pub fn plan_len(&self) -> usize {
        self.pipelines() * (self.d + 1)
    }
}

/// Perfect k-ary tree of depth `d`. Node signatures are `L{depth}` with the
/// child's position among its siblings as `branch`; the root is a real,
/// costed node.
pub fn gen_kary_tree(spec: &TreeSpec) -> Result<Dag> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let mut draw = |is_root: bool| -> (f64, f64) {
        let coin = match spec.size {
            SizeModel::TwoPoint { p, .. } if spec.coupled => Some(rng.gen_bool(p)),
            _ => None,
        };
        let cost = match spec.cost {
            CostModel::Uniform { cost } => cost,
            CostModel::RootHeavy { root, other } => {
                if is_root {
                    root
                } else {
                    other
                }
            }
            CostModel::TwoPoint { lo, hi, p } => {
                if coin.unwrap_or_else(|| rng.gen_bool(p)) {
                    hi
                } else {
                    lo
                }
            }
        };
        let size = match spec.size {
            SizeModel::Uniform { size } => size,
            SizeModel::TwoPoint { lo, hi, p } => {
                if coin.unwrap_or_else(|| rng.gen_bool(p)) {
                    hi
                } else {
                    lo
                }
            }
        };
        (cost, size)
    };
    let mut b = DagBuilder::new();
    let (c, m) = draw(true);
    let root = b.add_node(OpSignature::bare("L0"), c, m);
    let mut frontier = VecDeque::from([(root, 0usize)]);
    while let Some((parent, depth)) = frontier.pop_front() {
        if depth == spec.d {
            continue;
        }
        for branch in 0..spec.k {
            let (c, m) = draw(false);
            let sig = OpSignature::with_param(format!("L{}", depth + 1), "branch", branch as i64);
            let child = b.add_node(sig, c, m);
            b.add_edge(parent, child);
            frontier.push_back((child, depth + 1));
        }
    }
    b.build(root, false)
}

/// The toy batch: three 3-stage pipelines sharing `A(p=0.1)` and,
/// for two of them, `B(p=2)`.
pub fn toy_pipelines() -> Vec<PipelineSpec> {
    let a = OpSignature::with_param("A", "p", 0.1);
    let b = |p: i64| OpSignature::with_param("B", "p", p);
    let c = |p: i64| OpSignature::with_param("C", "p", p);
    vec![
        PipelineSpec::new(vec![a.clone(), b(2), c(10)]),
        PipelineSpec::new(vec![a.clone(), b(2), c(5)]),
        PipelineSpec::new(vec![a, b(4), c(8)]),
    ]
}

/// `count` pipelines of `len` stages sharing nothing.
pub fn disjoint_pipelines(count: usize, len: usize) -> Vec<PipelineSpec> {
    (0..count as i64)
        .map(|i| {
            PipelineSpec::new(
                (0..len)
                    .map(|s| OpSignature::with_param(format!("S{s}"), "id", i))
                    .collect(),
            )
        })
        .collect()
}

/// 16 pipelines in a 4 x 4 preprocessing grid, each ending in its own
/// training node. Each preprocessing step costs `max_resource / 2` so that
/// full training costs as much as both preprocessing steps together.
pub fn sh_example_pipelines() -> Vec<PipelineSpec> {
    let mut ps = Vec::new();
    for a in 0..4i64 {
        for b in 0..4i64 {
            let id = a * 4 + b;
            ps.push(PipelineSpec::new(vec![
                OpSignature::with_param("Prep1", "a", a),
                OpSignature::with_param("Prep2", "b", id),
                OpSignature::with_param("Train", "id", id),
            ]));
        }
    }
    ps
}

/// Cost and size of every node of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub cost: f64,
    pub size: f64,
}

/// Re-annotates `dag` so that every node at stage `s` gets `stages[s]`.
/// Stage 0 is the first level below a synthetic root, or the root itself.
pub fn annotate_stages(dag: &Dag, stages: &[StageCost]) -> Result<Dag> {
    let offset = usize::from(dag.has_synthetic_root());
    let root = dag.root();
    dag.annotated(|node, depth| {
        if offset == 1 && node.id == root {
            return Ok((0.0, 0.0));
        }
        let s = depth - offset;
        stages.get(s).map(|c| (c.cost, c.size)).ok_or_else(|| {
            Error::config(format!(
                "no cost given for stage {s} (node {})",
                node.signature
            ))
        })
    })
}

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetadata {
    pub time_unit: String,
    pub memory_unit: String,
    #[serde(default)]
    pub dataset: String,
}

impl Default for ProfileMetadata {
    fn default() -> Self {
        ProfileMetadata {
            time_unit: "unit".into(),
            memory_unit: "unit".into(),
            dataset: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub id: String,
    pub operator: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, ParamValue>,
    pub cost: f64,
    pub size: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFile {
    pub schema_version: u32,
    pub metadata: ProfileMetadata,
    pub nodes: Vec<ProfileRecord>,
}

impl ProfileFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profiles always serialize")
    }
}

/// A loaded profile.
#[derive(Debug, Clone)]
pub struct Profile {
    pub dag: Dag,
    pub pipelines: Vec<PipelineSpec>,
    pub metadata: ProfileMetadata,
}

pub fn load_profile(text: &str) -> Result<Profile> {
    let file: ProfileFile = serde_json::from_str(text)?;
    profile_to_dag(&file)
}

pub fn load_profile_file(path: impl AsRef<Path>) -> Result<Profile> {
    load_profile(&std::fs::read_to_string(path)?)
}

pub fn profile_to_dag(file: &ProfileFile) -> Result<Profile> {
    if file.schema_version != PROFILE_SCHEMA_VERSION {
        return Err(Error::load(
            "schema_version",
            format!(
                "unsupported version {} (expected {PROFILE_SCHEMA_VERSION})",
                file.schema_version
            ),
        ));
    }
    if file.metadata.time_unit.trim().is_empty() || file.metadata.memory_unit.trim().is_empty() {
        return Err(Error::load(
            "metadata",
            "time_unit and memory_unit must be declared",
        ));
    }
    if file.nodes.is_empty() {
        return Err(Error::load("nodes", "profile has no nodes"));
    }
    let mut index = HashMap::new();
    for (i, r) in file.nodes.iter().enumerate() {
        if index.insert(r.id.as_str(), i).is_some() {
            return Err(Error::load(&r.id, "duplicate id"));
        }
        if !(r.cost.is_finite() && r.cost >= 0.0) {
            return Err(Error::load(
                &r.id,
                format!("cost must be non-negative, got {}", r.cost),
            ));
        }
        if !(r.size.is_finite() && r.size >= 0.0) {
            return Err(Error::load(
                &r.id,
                format!("size must be non-negative, got {}", r.size),
            ));
        }
    }
    let mut parents: Vec<Vec<usize>> = Vec::with_capacity(file.nodes.len());
    for r in &file.nodes {
        let mut ps = Vec::with_capacity(r.parents.len());
        for p in &r.parents {
            match index.get(p.as_str()) {
                Some(&j) => ps.push(j),
                None => {
                    return Err(Error::load(
                        &r.id,
                        format!("orphan: parent `{p}` does not exist"),
                    ))
                }
            }
        }
        parents.push(ps);
    }
    // Kahn's algorithm; anything left over sits on a cycle.
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut children = vec![Vec::new(); file.nodes.len()];
    for (c, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(c);
        }
    }
    let mut queue: VecDeque<usize> = (0..file.nodes.len())
        .filter(|&i| indegree[i] == 0)
        .collect();
    let mut seen = 0;
    while let Some(i) = queue.pop_front() {
        seen += 1;
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if seen < file.nodes.len() {
        let stuck = (0..file.nodes.len()).find(|&i| indegree[i] > 0).unwrap();
        return Err(Error::load(&file.nodes[stuck].id, "node lies on a cycle"));
    }

    let sources: Vec<usize> = (0..file.nodes.len())
        .filter(|&i| parents[i].is_empty())
        .collect();
    for r in file.nodes.iter().filter(|r| r.synthetic) {
        if !r.parents.is_empty() || sources.len() != 1 {
            return Err(Error::load(
                &r.id,
                "a synthetic record must be the only source",
            ));
        }
    }
    let mut b = DagBuilder::new();
    let ids: Vec<NodeId> = file
        .nodes
        .iter()
        .map(|r| {
            b.add_node(
                OpSignature::new(r.operator.clone(), r.params.clone()),
                r.cost,
                r.size,
            )
        })
        .collect();
    for (c, ps) in parents.iter().enumerate() {
        for &p in ps {
            b.add_edge(ids[p], ids[c]);
        }
    }
    let (root, synthetic) = if sources.len() == 1 {
        (ids[sources[0]], file.nodes[sources[0]].synthetic)
    } else {
        let root = b.add_node(OpSignature::bare("<data>"), 0.0, 0.0);
        for &s in &sources {
            b.add_edge(root, ids[s]);
        }
        (root, true)
    };
    let dag = b
        .build(root, synthetic)
        .map_err(|e| Error::load("nodes", e.to_string()))?;
    let pipelines = dag.pipelines();
    Ok(Profile {
        dag,
        pipelines,
        metadata: file.metadata.clone(),
    })
}

/// Flat profile records for `dag`, ids `n0`, `n1`, ... in node order.
pub fn save_profile(dag: &Dag, metadata: ProfileMetadata) -> ProfileFile {
    let nodes = dag
        .nodes()
        .iter()
        .map(|n| ProfileRecord {
            id: n.id.to_string(),
            operator: n.signature.operator().to_string(),
            params: n.signature.params().clone(),
            cost: n.cost,
            size: n.size,
            parents: dag.parents(n.id).iter().map(|p| p.to_string()).collect(),
            synthetic: dag.has_synthetic_root() && n.id == dag.root(),
        })
        .collect();
    ProfileFile {
        schema_version: PROFILE_SCHEMA_VERSION,
        metadata,
        nodes,
    }
}

const BUILTIN_SPACES: [(&str, &str); 4] = [
    ("newsgroups", include_str!("../data/spaces/newsgroups.json")),
    ("amazon", include_str!("../data/spaces/amazon.json")),
    ("timit", include_str!("../data/spaces/timit.json")),
    (
        "openml_micro",
        include_str!("../data/spaces/openml_micro.json"),
    ),
];

pub fn builtin_space_names() -> Vec<&'static str> {
    BUILTIN_SPACES.iter().map(|s| s.0).collect()
}

/// The shipped search spaces by name.
pub fn builtin_spaces() -> BTreeMap<String, SearchSpace> {
    BUILTIN_SPACES
        .iter()
        .map(|(name, text)| {
            let space = SearchSpace::from_json(text).expect("shipped spaces are valid");
            (name.to_string(), space)
        })
        .collect()
}

pub fn builtin_space(name: &str) -> Result<SearchSpace> {
    BUILTIN_SPACES
        .iter()
        .find(|s| s.0 == name)
        .map(|(_, text)| SearchSpace::from_json(text))
        .unwrap_or_else(|| {
            Err(Error::config(format!(
                "unknown space `{name}` (available: {})",
                builtin_space_names().join(", ")
            )))
        })
}
