//! Naive reference simulator used as a correctness oracle.
//!
//! One simulation at a time, plain nested loops over steps, nodes and edges,
//! no batching, no vectorization and no shared kernel code with the engine.
//! It does share the keyed rng module and the draw-tag layout, so for every
//! model whose draw structure matches the engine's (all except IC) the final
//! state is bit-identical to the engine lane with the same simulation index.
//! IC uses independent per-edge trials here — the semantics the engine's
//! combined per-target draw must match in distribution only.

use crate::engine::StepBudget;
use crate::error::{Error, Result};
use crate::graph::{CsrGraph, SeedSet};
use crate::models::{ModelKind, ModelSpec};
use crate::rng::{uniform, uniform_int, DrawTag, RngKey};

/// Final state of one naive simulation: decoded labels, plus raw opinions
/// for continuous models.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub labels: Vec<u8>,
    pub opinions: Option<Vec<f64>>,
}

const NODE_GUARD: usize = 10_000;

struct Keys {
    master_seed: u64,
    sim_index: u32,
}

impl Keys {
    fn unif(&self, step: u32, node: u64, tag: DrawTag) -> f64 {
        uniform(&RngKey {
            master_seed: self.master_seed,
            sim_index: self.sim_index,
            step,
            node_id: node,
            draw_tag: tag,
        })
    }

    fn unif_int(&self, step: u32, node: u64, tag: DrawTag, n: u64) -> u64 {
        uniform_int(
            &RngKey {
                master_seed: self.master_seed,
                sim_index: self.sim_index,
                step,
                node_id: node,
                draw_tag: tag,
            },
            n,
        )
    }
}

/// Run one simulation of `spec` the slow way and return its final state.
///
/// `allow_large` overrides the soft node-count guard; the oracle is
/// deliberately unsuited to big graphs.
pub fn naive_epoch(
    spec: &ModelSpec,
    g: &CsrGraph,
    seeds: &SeedSet,
    budget: StepBudget,
    sim_index: u32,
    master_seed: u64,
    allow_large: bool,
) -> Result<OracleOutput> {
    if g.num_nodes() > NODE_GUARD && !allow_large {
        return Err(Error::Validation(format!(
            "oracle guard: graph has {} nodes (> {NODE_GUARD}); pass allow_large to override",
            g.num_nodes()
        )));
    }
    spec.validate_graph(g)?;
    if spec.requires_seeds() && seeds.is_empty() {
        return Err(Error::Validation(format!(
            "model {} requires a non-empty seed set",
            spec.model_id()
        )));
    }
    if matches!(budget, StepBudget::Converge) && !spec.supports_convergence() {
        return Err(Error::Validation(format!(
            "model {} has no guaranteed fixed point",
            spec.model_id()
        )));
    }
    let keys = Keys {
        master_seed,
        sim_index,
    };
    let n = g.num_nodes();
    let step_cap = match budget {
        StepBudget::Fixed(t) => t,
        StepBudget::Converge => 10 * n as u64,
    };

    match *spec.kind() {
        ModelKind::Si { beta } => {
            let mut h = seed_marks(n, seeds);
            for k in 1..=step_cap {
                let prev = h.clone();
                for i in 0..n {
                    if prev[i] == 0 {
                        let p = infection_prob(g, &prev, 1, i, beta);
                        if p > 0.0 && keys.unif(k as u32, i as u64, DrawTag::Infect) < p {
                            h[i] = 1;
                        }
                    }
                }
            }
            Ok(discrete(h))
        }
        ModelKind::Sis { beta, lambda } => {
            let mut h = seed_marks(n, seeds);
            for k in 1..=step_cap {
                let prev = h.clone();
                for i in 0..n {
                    if prev[i] == 1 {
                        if keys.unif(k as u32, i as u64, DrawTag::Recover) < lambda {
                            h[i] = 0;
                        }
                    } else {
                        let p = infection_prob(g, &prev, 1, i, beta);
                        if p > 0.0 && keys.unif(k as u32, i as u64, DrawTag::Infect) < p {
                            h[i] = 1;
                        }
                    }
                }
            }
            Ok(discrete(h))
        }
        ModelKind::Sir { beta, lambda } => {
            let mut h = seed_marks(n, seeds);
            let mut r = vec![0u8; n];
            for k in 1..=step_cap {
                let (ph, pr) = (h.clone(), r.clone());
                for i in 0..n {
                    if ph[i] == 0 && pr[i] == 0 {
                        let p = infection_prob(g, &ph, 1, i, beta);
                        if p > 0.0 && keys.unif(k as u32, i as u64, DrawTag::Infect) < p {
                            h[i] = 1;
                        }
                    } else if ph[i] == 1 {
                        if keys.unif(k as u32, i as u64, DrawTag::Recover) < lambda {
                            h[i] = 0;
                            r[i] = 1;
                        }
                    }
                }
            }
            let labels = h
                .iter()
                .zip(&r)
                .map(|(&h, &r)| if r == 1 { 2 } else { h })
                .collect();
            Ok(OracleOutput {
                labels,
                opinions: None,
            })
        }
        ModelKind::SeirDt {
            beta,
            lambda,
            alpha,
        } => {
            let mut e = vec![0u8; n];
            let mut h = seed_marks(n, seeds);
            let mut r = vec![0u8; n];
            for k in 1..=step_cap {
                let (pe, ph, pr) = (e.clone(), h.clone(), r.clone());
                for i in 0..n {
                    if pe[i] == 0 && ph[i] == 0 && pr[i] == 0 {
                        let p = infection_prob(g, &ph, 1, i, beta);
                        if p > 0.0 && keys.unif(k as u32, i as u64, DrawTag::Infect) < p {
                            e[i] = 1;
                        }
                    } else if pe[i] == 1 {
                        if keys.unif(k as u32, i as u64, DrawTag::Latent) < alpha {
                            e[i] = 0;
                            h[i] = 1;
                        }
                    } else if ph[i] == 1 {
                        if keys.unif(k as u32, i as u64, DrawTag::Recover) < lambda {
                            h[i] = 0;
                            r[i] = 1;
                        }
                    }
                }
            }
            let labels = (0..n)
                .map(|i| {
                    if r[i] == 1 {
                        3
                    } else if h[i] == 1 {
                        2
                    } else {
                        e[i]
                    }
                })
                .collect();
            Ok(OracleOutput {
                labels,
                opinions: None,
            })
        }
        ModelKind::IndependentCascades { p } => {
            let mut a = seed_marks(n, seeds);
            let mut k = 0u64;
            loop {
                let frozen = !a.contains(&1);
                let more = match budget {
                    StepBudget::Fixed(t) => k < t,
                    StepBudget::Converge => k < step_cap && !frozen,
                };
                if !more {
                    break;
                }
                k += 1;
                let prev = a.clone();
                for i in 0..n {
                    match prev[i] {
                        0 => {
                            // One independent trial per in-edge from a newly
                            // active source, keyed by the global edge index.
                            for e_idx in g.in_edge_range(i) {
                                if prev[g.src_idx()[e_idx] as usize] == 1 {
                                    let u = keys.unif(k as u32, e_idx as u64, DrawTag::EdgeTrial);
                                    if u < p {
                                        a[i] = 1;
                                        break;
                                    }
                                }
                            }
                        }
                        _ => a[i] = 2,
                    }
                }
            }
            Ok(discrete(a))
        }
        ModelKind::Threshold { tau } => {
            let mut a = seed_marks(n, seeds);
            let mut k = 0u64;
            let mut changed = true;
            loop {
                let more = match budget {
                    StepBudget::Fixed(t) => k < t,
                    StepBudget::Converge => k < step_cap && changed,
                };
                if !more {
                    break;
                }
                k += 1;
                let prev = a.clone();
                changed = false;
                for i in 0..n {
                    if prev[i] == 1 {
                        continue;
                    }
                    let mut active_w = 0.0f64;
                    let mut total_w = 0.0f64;
                    for e_idx in g.in_edge_range(i) {
                        let w = g.weights().map_or(1.0, |ws| ws[e_idx]);
                        total_w += w;
                        if prev[g.src_idx()[e_idx] as usize] == 1 {
                            active_w += w;
                        }
                    }
                    if total_w > 0.0 && active_w / total_w >= tau {
                        a[i] = 1;
                        changed = true;
                    }
                }
            }
            Ok(discrete(a))
        }
        ModelKind::Voter => {
            let mut o = seed_marks(n, seeds);
            for k in 1..=step_cap {
                let v = keys.unif_int(k as u32, 0, DrawTag::NodePick, n as u64) as usize;
                let seg = g.in_edge_range(v);
                if !seg.is_empty() {
                    let pick =
                        keys.unif_int(k as u32, 1 + v as u64, DrawTag::NodePick, seg.len() as u64);
                    o[v] = o[g.src_idx()[seg.start + pick as usize] as usize];
                }
            }
            Ok(discrete(o))
        }
        ModelKind::MajorityRule { q } => {
            let mut o = seed_marks(n, seeds);
            for k in 1..=step_cap {
                let mut group: Vec<u64> = Vec::with_capacity(q as usize);
                let mut attempt = 0u64;
                while (group.len() as u64) < q {
                    let c = keys.unif_int(
                        k as u32,
                        n as u64 + 1 + attempt,
                        DrawTag::NodePick,
                        n as u64,
                    );
                    attempt += 1;
                    if !group.contains(&c) {
                        group.push(c);
                    }
                }
                let ones: u64 = group.iter().map(|&m| (o[m as usize] == 1) as u64).sum();
                let majority = if 2 * ones > q {
                    1u8
                } else if 2 * ones == q {
                    (keys.unif(k as u32, n as u64, DrawTag::NodePick) < 0.5) as u8
                } else {
                    0u8
                };
                for &m in &group {
                    o[m as usize] = majority;
                }
            }
            Ok(discrete(o))
        }
        ModelKind::HegselmannKrause { epsilon } => {
            let mut o: Vec<f64> = (0..n)
                .map(|v| 2.0 * keys.unif(0, v as u64, DrawTag::OpinionInit) - 1.0)
                .collect();
            for _ in 1..=step_cap {
                let prev = o.clone();
                for i in 0..n {
                    let mut sum_c = 0.0f64;
                    let mut sum_v = 0.0f64;
                    for e_idx in g.in_edge_range(i) {
                        let j = g.src_idx()[e_idx] as usize;
                        if (prev[i] - prev[j]).abs() < epsilon {
                            sum_c += prev[j];
                            sum_v += 1.0;
                        }
                    }
                    if sum_v > 0.0 {
                        o[i] = sum_c / sum_v;
                    }
                }
            }
            let labels = o.iter().map(|&x| (x > 0.5) as u8).collect();
            Ok(OracleOutput {
                labels,
                opinions: Some(o),
            })
        }
    }
}

fn seed_marks(n: usize, seeds: &SeedSet) -> Vec<u8> {
    let mut v = vec![0u8; n];
    for &s in seeds.ids() {
        v[s as usize] = 1;
    }
    v
}

fn discrete(labels: Vec<u8>) -> OracleOutput {
    OracleOutput {
        labels,
        opinions: None,
    }
}

/// Per-target infection probability from transmitting in-neighbors, per-edge
/// log-space accumulation in CSR order.
fn infection_prob(g: &CsrGraph, chan: &[u8], want: u8, target: usize, beta: f64) -> f64 {
    let lw = (1.0 - beta).ln();
    let mut m = 0.0f64;
    for e_idx in g.in_edge_range(target) {
        if chan[g.src_idx()[e_idx] as usize] == want {
            m += match g.weights() {
                Some(ws) => ws[e_idx] * lw,
                None => lw,
            };
        }
    }
    1.0 - m.exp()
}

/// Exact expected IC activation by enumerating every outcome of the per-edge
/// trials: each directed edge is live with probability `p`, and a node
/// activates iff it is forward-reachable from a seed over live edges.
/// Restricted to graphs with at most 20 edges.
pub fn exhaustive_ic_expected_activation(g: &CsrGraph, seeds: &SeedSet, p: f64) -> Result<f64> {
    let m = g.num_edges();
    if m > 20 {
        return Err(Error::Validation(format!(
            "exhaustive enumeration supports at most 20 edges, graph has {m}"
        )));
    }
    if g.is_weighted() {
        return Err(Error::Validation(
            "independent cascades requires an unweighted graph".into(),
        ));
    }
    let n = g.num_nodes();
    // Out-adjacency (edge index -> (src, tgt)) from the in-CSR.
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(m);
    for v in 0..n {
        for e_idx in g.in_edge_range(v) {
            edges.push((g.src_idx()[e_idx] as usize, v));
        }
    }
    let mut expectation = 0.0f64;
    for mask in 0u32..(1u32 << m) {
        let live = mask.count_ones() as i32;
        let prob = p.powi(live) * (1.0 - p).powi(m as i32 - live);
        if prob == 0.0 {
            continue;
        }
        let mut reached = vec![false; n];
        let mut stack: Vec<usize> = seeds.ids().iter().map(|&s| s as usize).collect();
        for &s in seeds.ids() {
            reached[s as usize] = true;
        }
        while let Some(u) = stack.pop() {
            for (idx, &(src, tgt)) in edges.iter().enumerate() {
                if src == u && mask & (1 << idx) != 0 && !reached[tgt] {
                    reached[tgt] = true;
                    stack.push(tgt);
                }
            }
        }
        expectation += prob * reached.iter().filter(|&&x| x).count() as f64;
    }
    Ok(expectation)
}
