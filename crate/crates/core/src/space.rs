//! Stage-structured search spaces and the random, grid and gridded random
//! samplers that turn them into pipeline batches.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dag::{OpSignature, ParamValue, PipelineSpec};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

/// Domain of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamDomain {
    Continuous {
        lo: f64,
        hi: f64,
        #[serde(default)]
        scale: Scale,
    },
    /// Inclusive integer range.
    Integer {
        lo: i64,
        hi: i64,
    },
    Categorical {
        labels: Vec<String>,
    },
    Binary,
}

impl ParamDomain {
    pub fn continuous(lo: f64, hi: f64) -> Self {
        ParamDomain::Continuous {
            lo,
            hi,
            scale: Scale::Linear,
        }
    }

    pub fn log(lo: f64, hi: f64) -> Self {
        ParamDomain::Continuous {
            lo,
            hi,
            scale: Scale::Log,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ParamDomain::Continuous { lo, hi, scale } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::config(format!(
                        "continuous domain needs lo < hi, got ({lo}, {hi})"
                    )));
                }
                if scale == Scale::Log && lo <= 0.0 {
                    return Err(Error::config(format!(
                        "log-scale domain needs lo > 0, got {lo}"
                    )));
                }
            }
            ParamDomain::Integer { lo, hi } => {
                if lo >= hi {
                    return Err(Error::config(format!(
                        "integer domain needs lo < hi, got ({lo}, {hi})"
                    )));
                }
            }
            ParamDomain::Categorical { ref labels } => {
                if labels.is_empty() {
                    return Err(Error::config("categorical domain has no labels"));
                }
            }
            ParamDomain::Binary => {}
        }
        Ok(())
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match (self, value) {
            (ParamDomain::Continuous { lo, hi, .. }, ParamValue::Float(x)) => lo <= x && x <= hi,
            (ParamDomain::Integer { lo, hi }, ParamValue::Int(x)) => lo <= x && x <= hi,
            (ParamDomain::Categorical { labels }, ParamValue::Label(l)) => labels.contains(l),
            (ParamDomain::Binary, ParamValue::Bool(_)) => true,
            _ => false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match *self {
            ParamDomain::Continuous { lo, hi, scale } => {
                let x = match scale {
                    Scale::Linear => rng.gen_range(lo..=hi),
                    Scale::Log => rng.gen_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi),
                };
                ParamValue::Float(x)
            }
            ParamDomain::Integer { lo, hi } => ParamValue::Int(rng.gen_range(lo..=hi)),
            ParamDomain::Categorical { ref labels } => {
                ParamValue::Label(labels[rng.gen_range(0..labels.len())].clone())
            }
            ParamDomain::Binary => ParamValue::Bool(rng.gen()),
        }
    }

    /// `count` evenly spaced values (in log space for log-scale domains).
    /// Integer grids are rounded and deduplicated; categorical and binary
    /// grids pick evenly spaced labels and return all of them once `count`
    /// reaches the cardinality.
    pub fn grid(&self, count: usize) -> Vec<ParamValue> {
        assert!(count >= 1);
        let fractions: Vec<f64> = if count == 1 {
            vec![0.5]
        } else {
            (0..count).map(|i| i as f64 / (count - 1) as f64).collect()
        };
        match *self {
            ParamDomain::Continuous { lo, hi, scale } => fractions
                .iter()
                .map(|&f| {
                    let x = match scale {
                        Scale::Linear => lo + f * (hi - lo),
                        Scale::Log => lo * (hi / lo).powf(f),
                    };
                    ParamValue::Float(if f == 0.0 {
                        lo
                    } else if f == 1.0 {
                        hi
                    } else {
                        x
                    })
                })
                .collect(),
            ParamDomain::Integer { lo, hi } => {
                let mut values: Vec<i64> = fractions
                    .iter()
                    .map(|&f| (lo as f64 + f * (hi - lo) as f64).round() as i64)
                    .collect();
                values.dedup();
                values.into_iter().map(ParamValue::Int).collect()
            }
            ParamDomain::Categorical { ref labels } => pick_evenly(labels.len(), count)
                .into_iter()
                .map(|i| ParamValue::Label(labels[i].clone()))
                .collect(),
            ParamDomain::Binary => pick_evenly(2, count)
                .into_iter()
                .map(|i| ParamValue::Bool(i == 1))
                .collect(),
        }
    }
}

fn pick_evenly(cardinality: usize, count: usize) -> Vec<usize> {
    if count >= cardinality {
        return (0..cardinality).collect();
    }
    if count == 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..count)
        .map(|i| ((i * (cardinality - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamDomain>,
}

impl OperatorSpec {
    pub fn new(name: impl Into<String>) -> Self {
        OperatorSpec {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn param(mut self, name: impl Into<String>, domain: ParamDomain) -> Self {
        self.params.insert(name.into(), domain);
        self
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OpSignature {
        let params = self
            .params
            .iter()
            .map(|(k, d)| (k.clone(), d.sample(rng)))
            .collect();
        OpSignature::new(self.name.clone(), params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub operators: Vec<OperatorSpec>,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, operators: Vec<OperatorSpec>) -> Self {
        StageSpec {
            name: name.into(),
            operators,
        }
    }
}

/// Current version of the search-space file schema.
pub const SPACE_SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SPACE_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub stages: Vec<StageSpec>,
}

impl SearchSpace {
    pub fn new(name: impl Into<String>, stages: Vec<StageSpec>) -> Result<Self> {
        let space = SearchSpace {
            schema_version: SPACE_SCHEMA_VERSION,
            name: name.into(),
            stages,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SPACE_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported search space schema version {}",
                self.schema_version
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::config("search space has no stages"));
        }
        for stage in &self.stages {
            if stage.operators.is_empty() {
                return Err(Error::config(format!(
                    "stage `{}` has no operator choices",
                    stage.name
                )));
            }
            for op in &stage.operators {
                for (name, domain) in &op.params {
                    domain.validate().map_err(|e| {
                        Error::config(format!("{}/{}/{name}: {e}", stage.name, op.name))
                    })?;
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: SearchSpace = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search space serializes")
    }

    /// Keeps only the named operator in `stage`.
    pub fn restrict(&self, stage: &str, operator: &str) -> Result<Self> {
        let mut out = self.clone();
        let st = out
            .stages
            .iter_mut()
            .find(|s| s.name == stage)
            .ok_or_else(|| Error::config(format!("no stage named `{stage}`")))?;
        st.operators.retain(|o| o.name == operator);
        if st.operators.is_empty() {
            return Err(Error::config(format!(
                "stage `{stage}` has no operator `{operator}`"
            )));
        }
        Ok(out)
    }

    /// Checks that every stage of `pipeline` is a valid draw from this space.
    pub fn contains(&self, pipeline: &PipelineSpec) -> bool {
        pipeline.len() == self.stages.len()
            && self
                .stages
                .iter()
                .zip(&pipeline.stages)
                .all(|(stage, sig)| {
                    stage.operators.iter().any(|op| {
                        op.name == sig.operator()
                            && op.params.len() == sig.params().len()
                            && op
                                .params
                                .iter()
                                .all(|(k, d)| sig.get(k).is_some_and(|v| d.contains(v)))
                    })
                })
    }
}

/// Per-stage branching factors for gridded random search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchingPlan(pub Vec<usize>);

impl BranchingPlan {
    pub fn new(factors: Vec<usize>) -> Self {
        BranchingPlan(factors)
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        if self.0.len() != space.stages.len() {
            return Err(Error::config(format!(
                "branching plan has {} factors for {} stages",
                self.0.len(),
                space.stages.len()
            )));
        }
        if self.0.contains(&0) {
            return Err(Error::config("branching factors must be at least 1"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.0.iter().product()
    }
}

/// `n` independent uniform draws from `space`.
pub fn sample_random(space: &SearchSpace, n: usize, seed: u64) -> Vec<PipelineSpec> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            PipelineSpec::new(
                space
                    .stages
                    .iter()
                    .map(|stage| {
                        let op = &stage.operators[rng.gen_range(0..stage.operators.len())];
                        op.sample(&mut rng)
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Number of grid values per parameter, keyed `stage/operator/param`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridCounts {
    pub default: usize,
    pub overrides: BTreeMap<String, usize>,
}

impl GridCounts {
    pub fn uniform(count: usize) -> Self {
        GridCounts {
            default: count,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with(mut self, stage: &str, operator: &str, param: &str, count: usize) -> Self {
        self.overrides
            .insert(format!("{stage}/{operator}/{param}"), count);
        self
    }

    fn count(&self, stage: &str, operator: &str, param: &str) -> usize {
        self.overrides
            .get(&format!("{stage}/{operator}/{param}"))
            .copied()
            .unwrap_or(self.default)
    }
}

/// Default upper bound on the number of configurations a grid may expand to.
pub const DEFAULT_GRID_CAP: u128 = 1_000_000;

/// Full Cartesian grid over every stage, operator and parameter. The same
/// value set is reused below every parent.
pub fn sample_grid(
    space: &SearchSpace,
    counts: &GridCounts,
    cap: u128,
) -> Result<Vec<PipelineSpec>> {
    let mut stage_options: Vec<Vec<OpSignature>> = Vec::with_capacity(space.stages.len());
    for stage in &space.stages {
        let mut options = Vec::new();
        for op in &stage.operators {
            let mut combos: Vec<BTreeMap<String, ParamValue>> = vec![BTreeMap::new()];
            for (name, domain) in &op.params {
                let c = counts.count(&stage.name, &op.name, name);
                if c == 0 {
                    return Err(Error::config(format!(
                        "grid count for {}/{}/{name} must be at least 1",
                        stage.name, op.name
                    )));
                }
                let values = domain.grid(c);
                let size = (combos.len() as u128) * (values.len() as u128);
                if size > cap {
                    return Err(Error::GridOverflow {
                        size: size.to_string(),
                        cap,
                    });
                }
                combos = combos
                    .into_iter()
                    .flat_map(|m| {
                        values.iter().map(move |v| {
                            let mut m = m.clone();
                            m.insert(name.clone(), v.clone());
                            m
                        })
                    })
                    .collect();
            }
            options.extend(
                combos
                    .into_iter()
                    .map(|p| OpSignature::new(op.name.clone(), p)),
            );
        }
        stage_options.push(options);
    }

    let mut total: u128 = 1;
    for options in &stage_options {
        total = total.saturating_mul(options.len() as u128);
        if total > cap {
            let exact = stage_options
                .iter()
                .fold(1u128, |acc, o| acc.saturating_mul(o.len() as u128));
            return Err(Error::GridOverflow {
                size: exact.to_string(),
                cap,
            });
        }
    }

    let mut out = vec![Vec::new()];
    for options in &stage_options {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<OpSignature>| {
                options.iter().map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o.clone());
                    p
                })
            })
            .collect();
    }
    Ok(out.into_iter().map(PipelineSpec::new).collect())
}

/// Gridded random search: stage `k` draws `branching[k]` fresh settings below
/// every node of stage `k - 1`, so the merged DAG is a perfect tree of shape
/// `branching` while child values still differ between parents.
///
/// Randomness is hierarchical: the stream of child `j` is derived from its
/// parent's stream and `j`, so sibling draws do not depend on each other.
/// When a stage offers several operators the branching factor is split
/// between them as evenly as possible; the leftover slots go to a seeded
/// shuffle of the operators.
pub fn sample_gridded_random(
    space: &SearchSpace,
    branching: &BranchingPlan,
    seed: u64,
) -> Result<Vec<PipelineSpec>> {
    branching.validate(space)?;
    let mut out = Vec::with_capacity(branching.total());
    let mut prefix = Vec::with_capacity(space.stages.len());
    expand(space, &branching.0, 0, seed, &mut prefix, &mut out);
    Ok(out)
}

fn expand(
    space: &SearchSpace,
    branching: &[usize],
    depth: usize,
    node_seed: u64,
    prefix: &mut Vec<OpSignature>,
    out: &mut Vec<PipelineSpec>,
) {
    if depth == space.stages.len() {
        out.push(PipelineSpec::new(prefix.clone()));
        return;
    }
    let stage = &space.stages[depth];
    let b = branching[depth];
    let allocation = allocate(stage.operators.len(), b, seed::derive(node_seed, u64::MAX));
    for (j, &op_index) in allocation.iter().enumerate() {
        let child_seed = seed::derive(node_seed, j as u64);
        let mut rng = seed::rng(child_seed);
        prefix.push(stage.operators[op_index].sample(&mut rng));
        expand(space, branching, depth + 1, child_seed, prefix, out);
        prefix.pop();
    }
}

/// Operator index for each of `slots` children.
fn allocate(operators: usize, slots: usize, seed: u64) -> Vec<usize> {
    let base = slots / operators;
    let rem = slots % operators;
    let mut extra: Vec<usize> = (0..operators).collect();
    if rem > 0 {
        extra.shuffle(&mut seed::rng(seed));
        extra.truncate(rem);
        extra.sort();
    } else {
        extra.clear();
    }
    (0..operators)
        .flat_map(|o| std::iter::repeat_n(o, base + usize::from(extra.contains(&o))))
        .collect()
}
