use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipereuse"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> serde_json::Value {
    serde_json::from_str(&stdout(args)).unwrap()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const HEADER: &str = "policy,capacity,trials,mean_cost,stdev,speedup_vs_independent,status";

#[test]
fn merge_report_speedups() {
    let r = json(&["merge-report", "--workload", "toy"]);
    assert_eq!(r["tp_independent"], 9.0);
    assert_eq!(r["tp_merged"], 6.0);
    assert_eq!(r["speedup"], 1.5);
    assert_eq!(r["merged_nodes"], 6);
    assert_eq!(
        json(&["merge-report", "--workload", "disjoint"])["speedup"],
        1.0
    );
    let r = json(&["merge-report", "--space", "timit", "--branching", "4,25"]);
    assert_eq!(r["pipelines"], 100);
}

#[test]
fn simulate_header_and_zero_capacity() {
    let out = stdout(&[
        "simulate",
        "--workload",
        "root-heavy",
        "--capacities",
        "0,all",
        "--trials",
        "10",
    ]);
    assert_eq!(out.lines().next().unwrap(), HEADER);
    let rows = rows(&out);
    assert_eq!(rows.len(), 8);
    for r in &rows[..4] {
        assert_eq!(r[5], "1.0", "{r:?}");
    }
    let merged: Vec<&String> = rows[4..].iter().map(|r| &r[3]).collect();
    assert!(merged.iter().all(|c| *c == merged[0]));
    assert_eq!(rows[7][6], "optimal");
}

#[test]
fn speedups_stay_within_merge_bound() {
    let out = stdout(&[
        "simulate",
        "--workload",
        "two-point",
        "--capacities",
        "0,15,40,120",
        "--trials",
        "20",
    ]);
    for r in rows(&out) {
        assert!(r[5].parse::<f64>().unwrap() >= 1.0 - 1e-12, "{r:?}");
    }
    let report = json(&["merge-report", "--workload", "two-point"]);
    let limit = report["speedup"].as_f64().unwrap();
    for r in rows(&out) {
        assert!(r[5].parse::<f64>().unwrap() <= limit + 1e-9, "{r:?}");
    }
}

#[test]
fn guardrail_marks_opt_as_timeout() {
    let out = stdout(&[
        "simulate",
        "--workload",
        "tree:k=3,d=4,preset=root-heavy",
        "--capacities",
        "20",
        "--policies",
        "lru,opt",
        "--trials",
        "1",
    ]);
    let rows = rows(&out);
    assert_eq!(rows[1][0], "OPT");
    assert_eq!(rows[1][6], "timeout");
    let lru: f64 = rows[0][3].parse().unwrap();
    assert!(rows[1][3].parse::<f64>().unwrap() <= lru);
}

#[test]
fn single_generation_sh_matches_simulate() {
    let flags = [
        "--workload",
        "sh-example",
        "--capacities",
        "0,1,3,all",
        "--trials",
        "15",
    ];
    let mut sh = vec!["sh", "--sh", "16,1,4,1"];
    sh.extend(flags);
    let mut sim = vec!["simulate"];
    sim.extend(flags);
    assert_eq!(stdout(&sh), stdout(&sim));
}

#[test]
fn sh_reports_budget_and_improves_speedup() {
    let out = run(&[
        "sh",
        "--workload",
        "sh-example",
        "--sh",
        "16,1,4,3",
        "--mode",
        "retrain",
        "--capacities",
        "0",
    ]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("successive halving 3R, no early stopping 16R"),
        "{err}"
    );
    let r = json(&[
        "sh",
        "--workload",
        "sh-example",
        "--sh",
        "16,1,4,3",
        "--capacities",
        "0",
        "--format",
        "json",
    ]);
    assert_eq!(r["budget"]["successive_halving_r"], 3.0);
    let counts: Vec<usize> = r["generations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["trained"].as_array().unwrap().len())
        .collect();
    assert_eq!(counts, [16, 4, 1]);
    assert!(r["rows"][0]["speedup_vs_independent"].as_f64().unwrap() > 1.0);
}

#[test]
fn sh_dump_writes_generation_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    stdout(&[
        "sh",
        "--workload",
        "sh-example",
        "--sh",
        "16,1,4,3",
        "--capacities",
        "1",
        "--trials",
        "1",
        "--dump-dir",
        d,
    ]);
    for g in 1..=3 {
        let p = dir.path().join(format!("generation_{g}.json"));
        let profile = pipereuse::workloads::load_profile_file(&p).unwrap();
        assert_eq!(profile.pipelines.len(), [16, 4, 1][g - 1]);
    }
}

#[test]
fn sh_refuses_too_small_population() {
    let out = run(&[
        "sh",
        "--workload",
        "sh-example",
        "--sh",
        "16,1,4,5",
        "--capacities",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least one configuration"));
}

#[test]
fn config_errors_exit_with_two() {
    for args in [
        vec!["simulate", "--workload", "nope", "--capacities", "1"],
        vec!["simulate", "--workload", "toy", "--capacities", "-1"],
        vec![
            "simulate",
            "--workload",
            "toy",
            "--capacities",
            "1",
            "--policies",
            "fifo",
        ],
        vec!["merge-report", "--space", "missing"],
        vec!["merge-report", "--workload", "profile:/does/not/exist.json"],
        vec![
            "opt",
            "--workload",
            "toy",
            "--capacities",
            "1,2",
            "--milp",
            "/tmp/x.lp",
        ],
        vec!["simulate"],
    ] {
        assert_eq!(run(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn opt_is_monotone_and_exports_milp() {
    let r = json(&[
        "opt",
        "--workload",
        "tree:k=2,d=2",
        "--capacities",
        "0,1,2,3,all",
    ]);
    let costs: Vec<f64> = r
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x["optimal_cost"].as_f64().unwrap())
        .collect();
    assert_eq!(costs[0], 12.0);
    assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*costs.last().unwrap(), 7.0);
    assert!(r[0]["proved_optimal"].as_bool().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let lp = dir.path().join("m.lp");
    let r = json(&[
        "opt",
        "--workload",
        "toy",
        "--capacities",
        "2",
        "--milp",
        lp.to_str().unwrap(),
    ]);
    assert_eq!(r[0]["optimal_cost"], 6.0);
    let text = std::fs::read_to_string(&lp).unwrap();
    assert!(
        text.contains("Minimize")
            && text.contains("Subject To")
            && text.trim_end().ends_with("End")
    );
}

#[test]
fn gen_tree_round_trips_through_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tree.json");
    stdout(&[
        "gen-tree",
        "--k",
        "3",
        "--d",
        "2",
        "--preset",
        "root-heavy",
        "--out",
        path.to_str().unwrap(),
    ]);
    let spec = format!("profile:{}", path.display());
    let a = stdout(&[
        "simulate",
        "--workload",
        &spec,
        "--capacities",
        "10,all",
        "--trials",
        "5",
    ]);
    let b = stdout(&[
        "simulate",
        "--workload",
        "tree:k=3,d=2,preset=root-heavy",
        "--capacities",
        "10,all",
        "--trials",
        "5",
    ]);
    assert_eq!(a, b);
    assert!(Path::new(&path).exists());
}

#[test]
fn sample_emits_requested_pipelines() {
    let r = json(&[
        "sample",
        "--space",
        "newsgroups",
        "--branching",
        "2,2,2",
        "--seed",
        "4",
    ]);
    assert_eq!(r.as_array().unwrap().len(), 8);
    let csv = stdout(&[
        "sample",
        "--space",
        "amazon",
        "--samples",
        "5",
        "--format",
        "csv",
    ]);
    assert_eq!(csv.lines().count(), 6);
    let grid = json(&[
        "sample",
        "--space",
        "timit",
        "--sampler",
        "grid",
        "--grid-count",
        "2",
    ]);
    assert_eq!(grid.as_array().unwrap().len(), 8);
}

#[test]
fn workers_do_not_change_output() {
    let base = [
        "simulate",
        "--workload",
        "root-heavy",
        "--capacities",
        "10,20",
        "--trials",
        "30",
    ];
    let mut one = base.to_vec();
    one.extend(["--workers", "1"]);
    let mut four = base.to_vec();
    four.extend(["--workers", "4"]);
    assert_eq!(stdout(&one), stdout(&four));
}
