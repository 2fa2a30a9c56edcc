//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use pipereuse::cache::{trial_costs, PolicyKind};
use pipereuse::dag::{
    execution_plan, max_speedup_uniform, maximally_redundant, merge_pipelines,
    merge_pipelines_with, speedup, Dag, DagBuilder, NodeId, OpSignature, PipelineSpec,
    SignatureCosts,
};
use pipereuse::early_stopping::{
    min_resource, sh_budget, sh_subdags, successive_halving, ShParams, TrainingMode,
};
use pipereuse::opt::{build_instance, solve_exact, IlpInstance};
use pipereuse::space::{
    sample_gridded_random, BranchingPlan, OperatorSpec, ParamDomain, SearchSpace, StageSpec,
};
use pipereuse::workloads::{
    annotate_stages, builtin_space, gen_kary_tree, toy_pipelines, StageCost, TreeSpec,
};

/// Relative gap LRU must show over WRECIPROCAL at some small capacity.
const RANKING_MARGIN: f64 = 0.10;
const TRIALS: usize = 100;

/// SplitMix64 stream for test data.
struct Stream(u64);

impl Stream {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        pipereuse::seed::mix(self.0)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit_dag(ps: &[PipelineSpec]) -> Dag {
    merge_pipelines_with(ps, |_, _| Ok((1.0, 1.0))).unwrap().dag
}

fn toy_merge() -> Result<String, String> {
    let ps = toy_pipelines();
    let dag = unit_dag(&ps);
    let s = speedup(&ps, &SignatureCosts::uniform(&ps, 1.0)).map_err(|e| e.to_string())?;
    ensure(dag.total_cost_independent() == 9.0, || "TP(P) != 9".into())?;
    ensure(dag.total_cost_merged() == 6.0, || "TP(merged) != 6".into())?;
    ensure(s == 1.5, || format!("speedup {s}"))?;
    Ok("TP(P)=9 TP(merged)=6 speedup=1.5".into())
}

fn max_speedup_bound() -> Result<String, String> {
    let mut r = Stream(11);
    for case in 0..200 {
        let len = 1 + r.below(5) as usize;
        let count = 1 + r.below(30) as usize;
        let alphabet = 1 + r.below(4) as i64;
        let mut ps: Vec<PipelineSpec> = (0..count)
            .map(|_| {
                PipelineSpec::new(
                    (0..len)
                        .map(|i| {
                            OpSignature::with_param(
                                format!("S{i}"),
                                "v",
                                (r.next() % alphabet as u64) as i64,
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        let mut seen = std::collections::HashSet::new();
        ps.retain(|p| seen.insert(p.clone()));
        let s = speedup(&ps, &SignatureCosts::uniform(&ps, 1.0)).unwrap();
        let bound = max_speedup_uniform(len, ps.len());
        ensure(s <= bound + 1e-12, || {
            format!("case {case}: speedup {s} above bound {bound}")
        })?;
    }
    for (v, p) in [(1, 1), (3, 3), (4, 10), (5, 17)] {
        let ps = maximally_redundant(v, p);
        let s = speedup(&ps, &SignatureCosts::uniform(&ps, 1.0)).unwrap();
        ensure((s - max_speedup_uniform(v, p)).abs() < 1e-12, || {
            format!("bound not attained at ({v}, {p})")
        })?;
    }
    Ok("200 random sets within bound; construction attains it".into())
}

fn kary_sizing() -> Result<String, String> {
    let rows: [(usize, usize, usize, usize, usize, usize); 12] = [
        (2, 2, 4, 7, 12, 84),
        (2, 3, 8, 15, 32, 480),
        (2, 4, 16, 31, 80, 2480),
        (2, 5, 32, 63, 192, 12096),
        (3, 2, 9, 13, 27, 351),
        (3, 3, 27, 40, 108, 4320),
        (3, 4, 81, 121, 405, 49005),
        (3, 5, 243, 364, 1458, 530712),
        (4, 2, 16, 21, 48, 1008),
        (4, 3, 64, 85, 256, 21760),
        (4, 4, 256, 341, 1280, 436480),
        (4, 5, 1024, 1365, 6144, 8386560),
    ];
    for (k, d, p, n, t, x) in rows {
        let dag = gen_kary_tree(&TreeSpec::uniform(k, d)).unwrap();
        let plan = execution_plan(&dag).unwrap();
        let inst = build_instance(&dag, &plan, 1.0).unwrap();
        let got = (
            plan.paths().len(),
            inst.nodes().len(),
            inst.steps(),
            inst.x_count(),
        );
        ensure(got == (p, n, t, x), || {
            format!("k={k} d={d}: got {got:?}, want {:?}", (p, n, t, x))
        })?;
    }
    Ok("all twelve rows match".into())
}

fn random_dag(r: &mut Stream, max_nodes: u64) -> Dag {
    let n = 2 + r.below(max_nodes - 1) as usize;
    let mut b = DagBuilder::new();
    let mut ids: Vec<NodeId> = Vec::new();
    for i in 0..n {
        let cost = r.below(7) as f64;
        let size = 1.0 + r.below(4) as f64;
        let id = b.add_node(OpSignature::with_param("op", "i", i as i64), cost, size);
        if i > 0 {
            let p = r.below(i as u64) as usize;
            b.add_edge(ids[p], id);
            if i > 2 && r.below(5) == 0 {
                let q = r.below(i as u64) as usize;
                if q != p {
                    b.add_edge(ids[q], id);
                }
            }
        }
        ids.push(id);
    }
    b.build(ids[0], false).unwrap()
}

/// Minimum cost over every feasible cache trajectory, by exhaustive DP over
/// subsets of cached nodes.
fn brute_force(inst: &IlpInstance) -> f64 {
    let n = inst.nodes().len();
    let sizes: Vec<f64> = inst
        .nodes()
        .iter()
        .map(|&v| inst.dag().node(v).size)
        .collect();
    let weight = |s: usize| -> f64 { (0..n).filter(|j| s >> j & 1 == 1).map(|j| sizes[j]).sum() };
    let mut dp = vec![f64::INFINITY; 1 << n];
    dp[0] = 0.0;
    for t in 0..inst.steps() {
        let active: usize = inst.active(t).iter().map(|&j| 1 << j).sum();
        let it = 1usize << inst.step_node(t);
        let mut next = vec![f64::INFINITY; 1 << n];
        for s in 0..(1usize << n) {
            if dp[s].is_infinite() {
                continue;
            }
            let paid = dp[s] + if s & active == 0 { inst.cost(t) } else { 0.0 };
            let pool = s | it;
            let mut sub = pool;
            loop {
                if (s & it == 0 || sub & it != 0) && weight(sub) <= inst.capacity() {
                    next[sub] = next[sub].min(paid);
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & pool;
            }
        }
        dp = next;
    }
    dp.into_iter().fold(f64::INFINITY, f64::min)
}

fn solver_oracle() -> Result<String, String> {
    let mut r = Stream(404);
    let mut checked = 0;
    while checked < 100 {
        let dag = random_dag(&mut r, 8);
        let plan = execution_plan(&dag).unwrap();
        if plan.len() > 16 {
            continue;
        }
        let total = dag.total_size();
        for cap in [1.0, (total / 3.0).floor(), (total / 2.0).floor()] {
            let inst = build_instance(&dag, &plan, cap).unwrap();
            let exact = solve_exact(&inst, None).unwrap();
            let brute = brute_force(&inst);
            ensure(exact.proved_optimal && exact.optimal_cost == brute, || {
                format!(
                    "dag {checked} capacity {cap}: solver {} vs brute force {brute}",
                    exact.optimal_cost
                )
            })?;
        }
        checked += 1;
    }
    Ok("100 DAGs x 3 capacities agree".into())
}

fn mean_cost(
    dag: &Dag,
    plan: &pipereuse::dag::ExecutionPlan,
    kind: PolicyKind,
    cap: f64,
    seed: u64,
) -> f64 {
    let (_, costs) = trial_costs(plan, dag, |s| kind.build(s), cap, TRIALS, seed).unwrap();
    costs.iter().sum::<f64>() / costs.len() as f64
}

fn opt_dominance() -> Result<String, String> {
    for (label, spec) in [
        ("root-heavy", TreeSpec::root_heavy(3, 2)),
        ("two-point", TreeSpec::two_point(3, 2, 7)),
    ] {
        let dag = gen_kary_tree(&spec).unwrap();
        let plan = execution_plan(&dag).unwrap();
        for cap in [0.0, 10.0, 20.0, 50.0, 100.0, 150.0, dag.total_size()] {
            let opt = solve_exact(&build_instance(&dag, &plan, cap).unwrap(), None).unwrap();
            ensure(opt.proved_optimal, || {
                format!("{label} capacity {cap} not proved")
            })?;
            for kind in PolicyKind::ALL {
                let m = mean_cost(&dag, &plan, kind, cap, 3);
                ensure(opt.optimal_cost <= m, || {
                    format!(
                        "{label} capacity {cap}: OPT {} > {kind} {m}",
                        opt.optimal_cost
                    )
                })?;
            }
        }
    }
    Ok("OPT <= every policy mean on both d=2 trees".into())
}

fn root_heavy_ranking() -> Result<String, String> {
    let dag = gen_kary_tree(&TreeSpec::root_heavy(3, 3)).unwrap();
    let plan = execution_plan(&dag).unwrap();
    let mut best_gap = f64::NEG_INFINITY;
    let mut at = 0.0;
    for cap in [10.0, 20.0, 30.0] {
        let means: Vec<f64> = PolicyKind::ALL
            .iter()
            .map(|&k| mean_cost(&dag, &plan, k, cap, 5))
            .collect();
        let best = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let (lru, wrec) = (means[0] / best, means[2] / best);
        let gap = lru / wrec - 1.0;
        if gap > best_gap {
            best_gap = gap;
            at = cap;
        }
    }
    ensure(best_gap >= RANKING_MARGIN, || {
        format!("largest LRU excess {best_gap:.3} below {RANKING_MARGIN}")
    })?;
    let full = dag.total_size();
    for kind in PolicyKind::ALL {
        let m = mean_cost(&dag, &plan, kind, full, 5);
        ensure(m == dag.total_cost_merged(), || {
            format!("{kind} at saturation costs {m}")
        })?;
    }
    Ok(format!(
        "LRU ratio exceeds WRECIPROCAL by {:.0}% at capacity {at}; saturation equal",
        best_gap * 100.0
    ))
}

fn sh_budget_arithmetic() -> Result<String, String> {
    let p = ShParams::new(16, 1.0, 4, 3).unwrap();
    let b = sh_budget(&p);
    ensure(
        b.successive_halving == 3.0 && b.no_early_stopping == 16.0,
        || format!("{b:?}"),
    )?;
    ensure(b.no_early_stopping / b.successive_halving > 5.0, || {
        "ratio not above 5".into()
    })?;
    let p = ShParams::new(256, 1.0, 4, 5).unwrap();
    ensure(min_resource(&p) == 1.0 / 256.0, || {
        format!("min resource {}", min_resource(&p))
    })?;
    Ok("3R vs 16R; r = R/256".into())
}

fn sh_argmin() -> Result<String, String> {
    let mut r = Stream(8);
    for table in 0..1000 {
        let eta = 2 + r.below(3) as usize;
        let g = 1 + r.below(3) as usize;
        let n = eta.pow(g as u32 - 1) + r.below(40) as usize;
        let scores: Vec<u64> = (0..n).map(|_| r.below(1000)).collect();
        let params = ShParams::new(n, 1.0, eta, g).unwrap();
        let oracle = |c: &usize, _r: f64, _s: u64| -> Result<f64, String> { Ok(scores[*c] as f64) };
        let ids: Vec<usize> = (0..n).collect();
        let out = successive_halving(&ids, &params, &oracle, table).unwrap();
        let best = (0..n).min_by_key(|&i| (scores[i], i)).unwrap();
        ensure(out.winner == best, || {
            format!("table {table}: winner {} vs argmin {best}", out.winner)
        })?;
    }
    Ok("1000 tables".into())
}

fn gridded_structure() -> Result<String, String> {
    let stage = |name: &str, op: &str| {
        StageSpec::new(
            name,
            vec![OperatorSpec::new(op).param("x", ParamDomain::log(1e-4, 1e4))],
        )
    };
    let space =
        SearchSpace::new("s", vec![stage("a", "A"), stage("b", "B"), stage("c", "C")]).unwrap();
    let ps = sample_gridded_random(&space, &BranchingPlan::new(vec![4, 5, 5]), 1).unwrap();
    let dag = merge_pipelines(&ps).unwrap().dag;
    ensure(ps.len() == 100, || format!("{} pipelines", ps.len()))?;
    ensure(dag.level_sizes() == [1, 4, 20, 100], || {
        format!("levels {:?}", dag.level_sizes())
    })?;
    let two = SearchSpace::new("t", vec![stage("a", "A"), stage("b", "B")]).unwrap();
    let ps = sample_gridded_random(&two, &BranchingPlan::new(vec![2, 2]), 1).unwrap();
    let dag = merge_pipelines(&ps).unwrap().dag;
    let count = |op: &str| {
        dag.operator_nodes()
            .filter(|n| n.signature.operator() == op)
            .count()
    };
    ensure(count("A") == 2 && count("B") == 4, || {
        "expected 2 A and 4 B nodes".into()
    })?;
    let a_nodes: Vec<_> = dag.children(dag.root()).to_vec();
    ensure(a_nodes.iter().all(|&a| dag.children(a).len() == 2), || {
        "each A must have two B children".into()
    })?;
    Ok("(4,5,5) -> 4/20/100; (2,2) -> 2 A x 2 B".into())
}

fn trend_reproduction() -> Result<String, String> {
    let space = builtin_space("timit").unwrap();
    // Training dominates: LBFGS costs more than its whole upstream.
    let stages = [
        StageCost {
            cost: 1.0,
            size: 10.0,
        },
        StageCost {
            cost: 5.0,
            size: 1.0,
        },
    ];
    let capacities = [10.0, 15.0, 40.0];
    let build = |b: usize| -> Dag {
        let ps = sample_gridded_random(&space, &BranchingPlan::new(vec![b, 100 / b]), 17).unwrap();
        annotate_stages(&merge_pipelines(&ps).unwrap().dag, &stages).unwrap()
    };
    let mut previous = vec![f64::INFINITY; capacities.len()];
    for b in [1, 2, 4, 5, 10, 20, 25, 50, 100] {
        let dag = build(b);
        let plan = execution_plan(&dag).unwrap();
        for (i, &cap) in capacities.iter().enumerate() {
            let s = dag.total_cost_independent()
                / mean_cost(&dag, &plan, PolicyKind::WReciprocal, cap, 9);
            ensure(s <= previous[i], || {
                format!(
                    "speedup rises at branching {b}, capacity {cap}: {} -> {s}",
                    previous[i]
                )
            })?;
            previous[i] = s;
        }
    }
    let dag = build(10);
    let baseline = dag.total_cost_independent();
    let ids: Vec<usize> = (0..dag.paths().len()).collect();
    let speedups = |g: usize| -> Vec<f64> {
        let params = ShParams::new(ids.len(), 1.0, 4, g).unwrap();
        let oracle = |c: &usize, _r: f64, _s: u64| -> Result<f64, String> {
            Ok(pipereuse::seed::mix(*c as u64) as f64)
        };
        let out = successive_halving(&ids, &params, &oracle, 0).unwrap();
        let w = sh_subdags(
            &dag,
            &out.trained_per_generation(),
            &params,
            TrainingMode::WarmStart,
        )
        .unwrap();
        let plan = w.plan().unwrap();
        capacities
            .iter()
            .map(|&c| baseline / mean_cost(&w.dag, &plan, PolicyKind::WReciprocal, c, 9))
            .collect()
    };
    let (g1, g4) = (speedups(1), speedups(4));
    for (i, cap) in capacities.iter().enumerate() {
        ensure(g4[i] > g1[i], || {
            format!("capacity {cap}: G=4 {} not above G=1 {}", g4[i], g1[i])
        })?;
    }
    Ok(format!(
        "WRECIPROCAL speedup non-increasing in branching; SH G=4 {:.2}x vs G=1 {:.2}x at capacity {}",
        g4[0], g1[0], capacities[0]
    ))
}

fn determinism() -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_pipereuse");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: Vec<Vec<&str>> = vec![
        vec!["merge-report", "--workload", "toy"],
        vec![
            "simulate",
            "--workload",
            "root-heavy",
            "--capacities",
            "0,10,30,all",
            "--trials",
            "20",
        ],
        vec![
            "sh",
            "--workload",
            "sh-example",
            "--sh",
            "16,1,4,3",
            "--capacities",
            "0,2,all",
            "--trials",
            "20",
        ],
        vec![
            "opt",
            "--workload",
            "tree:k=2,d=2,preset=root-heavy",
            "--capacities",
            "0,10,all",
        ],
        vec!["sample", "--space", "timit", "--branching", "4,5"],
        vec![
            "gen-tree",
            "--k",
            "3",
            "--d",
            "2",
            "--preset",
            "two-point",
            "--seed",
            "3",
        ],
    ];
    for (i, args) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let path = dir.path().join(format!("run{i}_{rep}"));
            let status = Command::new(bin)
                .args(args)
                .arg("--out")
                .arg(&path)
                .status()
                .map_err(|e| e.to_string())?;
            ensure(status.success(), || format!("`{}` failed", args.join(" ")))?;
            outputs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        ensure(outputs[0] == outputs[1], || {
            format!("`{}` differs between runs", args.join(" "))
        })?;
    }
    Ok(format!(
        "{} commands bit-identical across reruns",
        runs.len()
    ))
}

fn main() {
    let checks: [(usize, &str, Check); 11] = [
        (1, "toy merge arithmetic", toy_merge),
        (2, "maximum speedup bound", max_speedup_bound),
        (3, "k-ary instance sizing", kary_sizing),
        (4, "exact solver vs brute force", solver_oracle),
        (5, "OPT dominance on d=2 trees", opt_dominance),
        (6, "root-heavy tree policy ranking", root_heavy_ranking),
        (7, "SH budget arithmetic", sh_budget_arithmetic),
        (8, "SH finds the argmin", sh_argmin),
        (9, "gridded random structure", gridded_structure),
        (10, "end-to-end trends", trend_reproduction),
        (11, "CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} ({secs:.2}s)"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why} ({secs:.2}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
