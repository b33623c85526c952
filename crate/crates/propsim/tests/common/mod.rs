//! Shared test fixtures: a small deterministic RNG and random graph
//! generators with different degree profiles.

use propsim::graph::{CsrGraph, SeedSet};
use propsim::models::{ModelKind, ModelSpec};

/// SplitMix64 test RNG, independent of the engine's keyed generator.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    pub fn range_f(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

/// Uniform random directed multigraph with `m` edges.
pub fn er_graph(rng: &mut TestRng, n: usize, m: usize, weighted: bool) -> CsrGraph {
    let edges: Vec<(u64, u64)> = (0..m)
        .map(|_| (rng.below(n as u64), rng.below(n as u64)))
        .collect();
    let weights: Option<Vec<f64>> =
        weighted.then(|| (0..m).map(|_| rng.range_f(0.25, 3.0)).collect());
    CsrGraph::from_edges(n, &edges, weights.as_deref(), true).unwrap()
}

/// Skewed in-degree profile: targets concentrate on low node ids.
pub fn skewed_graph(rng: &mut TestRng, n: usize, m: usize, weighted: bool) -> CsrGraph {
    let edges: Vec<(u64, u64)> = (0..m)
        .map(|_| {
            let u = rng.uniform();
            let tgt = ((u * u) * n as f64) as u64 % n as u64;
            (rng.below(n as u64), tgt)
        })
        .collect();
    let weights: Option<Vec<f64>> =
        weighted.then(|| (0..m).map(|_| rng.range_f(0.25, 3.0)).collect());
    CsrGraph::from_edges(n, &edges, weights.as_deref(), true).unwrap()
}

pub const ALL_MODELS: [&str; 9] = [
    "si",
    "sis",
    "sir",
    "seir_dt",
    "ic",
    "threshold",
    "voter",
    "majority_rule",
    "hk",
];

/// A model spec with random valid parameters.
pub fn random_spec(rng: &mut TestRng, model: &str, num_nodes: usize) -> ModelSpec {
    let kind = match model {
        "si" => ModelKind::Si {
            beta: rng.range_f(0.05, 0.9),
        },
        "sis" => ModelKind::Sis {
            beta: rng.range_f(0.05, 0.9),
            lambda: rng.range_f(0.05, 0.9),
        },
        "sir" => ModelKind::Sir {
            beta: rng.range_f(0.05, 0.9),
            lambda: rng.range_f(0.05, 0.9),
        },
        "seir_dt" => ModelKind::SeirDt {
            beta: rng.range_f(0.05, 0.9),
            lambda: rng.range_f(0.05, 0.9),
            alpha: rng.range_f(0.05, 0.9),
        },
        "ic" => ModelKind::IndependentCascades {
            p: rng.range_f(0.1, 0.9),
        },
        "threshold" => ModelKind::Threshold {
            tau: rng.range_f(0.0, 1.0),
        },
        "voter" => ModelKind::Voter,
        "majority_rule" => ModelKind::MajorityRule {
            q: 1 + rng.below(num_nodes.min(7) as u64),
        },
        "hk" => ModelKind::HegselmannKrause {
            epsilon: rng.range_f(0.05, 2.0),
        },
        other => panic!("unknown model {other}"),
    };
    ModelSpec::new(kind).unwrap()
}

/// A random non-empty seed set of about 20% of the nodes.
pub fn random_seeds(rng: &mut TestRng, num_nodes: usize) -> SeedSet {
    let k = 1 + rng.below((num_nodes as u64 / 5).max(1)) as usize;
    let ids: Vec<u64> = (0..k).map(|_| rng.below(num_nodes as u64)).collect();
    SeedSet::new(ids, num_nodes).unwrap()
}
