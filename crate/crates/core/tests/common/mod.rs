#![allow(dead_code)]

use pipereuse::dag::{Dag, DagBuilder, NodeId, OpSignature};
use pipereuse::opt::IlpInstance;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random rooted DAG with at most `max_nodes` nodes and integral costs and
/// sizes; some nodes get a second parent. The root is real.
pub fn random_dag(rng: &mut ChaCha8Rng, max_nodes: usize) -> Dag {
    let n = rng.gen_range(2..=max_nodes);
    let mut b = DagBuilder::new();
    let mut ids: Vec<NodeId> = Vec::new();
    for i in 0..n {
        let cost = rng.gen_range(0..=6) as f64;
        let size = rng.gen_range(1..=4) as f64;
        let id = b.add_node(OpSignature::with_param("op", "i", i as i64), cost, size);
        if i > 0 {
            let p = rng.gen_range(0..i);
            b.add_edge(ids[p], id);
            if i > 2 && rng.gen_bool(0.2) {
                let q = rng.gen_range(0..i);
                if q != p {
                    b.add_edge(ids[q], id);
                }
            }
        }
        ids.push(id);
    }
    b.build(ids[0], false).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exhaustive dynamic program over every cache subset: at each step pay
/// unless the pre-step cache meets the active set, then move to any subset
/// of `cache + {i_t}` that keeps `i_t` if it was resident and fits.
pub fn brute_force_opt(inst: &IlpInstance) -> f64 {
    let n = inst.nodes().len();
    assert!(n <= 12, "brute force is exponential");
    let sizes: Vec<f64> = inst
        .nodes()
        .iter()
        .map(|&v| inst.dag().node(v).size)
        .collect();
    let size_of = |s: usize| -> f64 { (0..n).filter(|j| s >> j & 1 == 1).map(|j| sizes[j]).sum() };
    let mut dp = vec![f64::INFINITY; 1 << n];
    dp[0] = 0.0;
    for t in 0..inst.steps() {
        let mut next = vec![f64::INFINITY; 1 << n];
        let active: usize = inst.active(t).iter().map(|&j| 1 << j).sum();
        let it = 1usize << inst.step_node(t);
        for s in 0..(1usize << n) {
            if dp[s].is_infinite() {
                continue;
            }
            let cost = dp[s] + if s & active == 0 { inst.cost(t) } else { 0.0 };
            let union = s | it;
            let mut sub = union;
            loop {
                let keeps_active = s & it == 0 || sub & it != 0;
                if keeps_active && size_of(sub) <= inst.capacity() && cost < next[sub] {
                    next[sub] = cost;
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & union;
            }
        }
        dp = next;
    }
    dp.into_iter().fold(f64::INFINITY, f64::min)
}
