//! Propagation model catalog: parameter validation, state-channel layout,
//! label coding and the per-model kernel triples (message, aggregate,
//! update) executed by the engine.
//!
//! Epidemic transmission uses the log-space form: each transmitting
//! in-neighbor contributes `w * ln(1 - beta)` and the infection probability
//! is `1 - exp(sum)`, which equals `1 - prod (1-beta)^w`. On unweighted
//! graphs every contribution is the same constant, so the per-target sum
//! depends only on the transmitter count; [`TransmissionTable`] precomputes
//! those repeated-addition sums so the batched engine and the naive oracle
//! produce bit-identical probabilities.
//!
//! beta = 1 makes the contribution `-inf` and the infection probability
//! exactly 1; this is the documented limit of the log-space form.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::rng::{uniform, uniform_int, DrawTag, RngKey};

/// Storage type of one state channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    U8,
    F64,
}

/// Description of one named per-node state channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelDesc {
    pub name: &'static str,
    pub kind: ChannelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationMode {
    /// All nodes update in one time step.
    Synchronous,
    /// One node or group updates per time step, chosen per lane.
    Asynchronous,
}

/// Model identifier plus validated named parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Si { beta: f64 },
    Sis { beta: f64, lambda: f64 },
    Sir { beta: f64, lambda: f64 },
    SeirDt { beta: f64, lambda: f64, alpha: f64 },
    IndependentCascades { p: f64 },
    Threshold { tau: f64 },
    Voter,
    MajorityRule { q: u64 },
    HegselmannKrause { epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    kind: ModelKind,
}

fn check_prob(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(Error::Validation(format!(
            "parameter {name} must be in [0, 1], got {v}"
        )));
    }
    Ok(())
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Result<Self> {
        match &kind {
            ModelKind::Si { beta } => check_prob("beta", *beta)?,
            ModelKind::Sis { beta, lambda } => {
                check_prob("beta", *beta)?;
                check_prob("lambda", *lambda)?;
            }
            ModelKind::Sir { beta, lambda } => {
                check_prob("beta", *beta)?;
                check_prob("lambda", *lambda)?;
            }
            ModelKind::SeirDt {
                beta,
                lambda,
                alpha,
            } => {
                check_prob("beta", *beta)?;
                check_prob("lambda", *lambda)?;
                check_prob("alpha", *alpha)?;
            }
            ModelKind::IndependentCascades { p } => check_prob("p", *p)?,
            ModelKind::Threshold { tau } => check_prob("tau", *tau)?,
            ModelKind::Voter => {}
            ModelKind::MajorityRule { q } => {
                if *q < 1 {
                    return Err(Error::Validation(format!(
                        "parameter q must be >= 1, got {q}"
                    )));
                }
            }
            ModelKind::HegselmannKrause { epsilon } => {
                if !(*epsilon > 0.0) || !epsilon.is_finite() {
                    return Err(Error::Validation(format!(
                        "parameter epsilon must be > 0, got {epsilon}"
                    )));
                }
            }
        }
        Ok(Self { kind })
    }

    /// Resolve a model from its CLI/config name and a named-parameter map.
    /// Unknown or missing parameter names are hard errors.
    pub fn from_name_params(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let mut remaining = params.clone();
        let mut take = |key: &str| -> Result<f64> {
            remaining
                .remove(key)
                .ok_or_else(|| Error::Config(format!("model {name} requires parameter {key}")))
        };
        let kind = match name {
            "si" => ModelKind::Si { beta: take("beta")? },
            "sis" => ModelKind::Sis {
                beta: take("beta")?,
                lambda: take("lambda")?,
            },
            "sir" => ModelKind::Sir {
                beta: take("beta")?,
                lambda: take("lambda")?,
            },
            "seir_dt" => ModelKind::SeirDt {
                beta: take("beta")?,
                lambda: take("lambda")?,
                alpha: take("alpha")?,
            },
            "ic" => ModelKind::IndependentCascades { p: take("p")? },
            "threshold" => ModelKind::Threshold { tau: take("tau")? },
            "voter" => ModelKind::Voter,
            "majority_rule" => {
                let q = take("q")?;
                if q.fract() != 0.0 || q < 1.0 || q > u32::MAX as f64 {
                    return Err(Error::Config(format!(
                        "parameter q must be a positive integer, got {q}"
                    )));
                }
                ModelKind::MajorityRule { q: q as u64 }
            }
            "hk" => ModelKind::HegselmannKrause {
                epsilon: take("epsilon")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown model {other:?}; expected one of si, sis, sir, seir_dt, \
                     ic, threshold, voter, majority_rule, hk"
                )))
            }
        };
        drop(take);
        if let Some(key) = remaining.keys().next() {
            return Err(Error::Config(format!(
                "unknown parameter {key:?} for model {name}"
            )));
        }
        Self::new(kind)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn model_id(&self) -> &'static str {
        match self.kind {
            ModelKind::Si { .. } => "si",
            ModelKind::Sis { .. } => "sis",
            ModelKind::Sir { .. } => "sir",
            ModelKind::SeirDt { .. } => "seir_dt",
            ModelKind::IndependentCascades { .. } => "ic",
            ModelKind::Threshold { .. } => "threshold",
            ModelKind::Voter => "voter",
            ModelKind::MajorityRule { .. } => "majority_rule",
            ModelKind::HegselmannKrause { .. } => "hk",
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match &self.kind {
            ModelKind::Si { beta } => {
                m.insert("beta".into(), *beta);
            }
            ModelKind::Sis { beta, lambda } | ModelKind::Sir { beta, lambda } => {
                m.insert("beta".into(), *beta);
                m.insert("lambda".into(), *lambda);
            }
            ModelKind::SeirDt {
                beta,
                lambda,
                alpha,
            } => {
                m.insert("beta".into(), *beta);
                m.insert("lambda".into(), *lambda);
                m.insert("alpha".into(), *alpha);
            }
            ModelKind::IndependentCascades { p } => {
                m.insert("p".into(), *p);
            }
            ModelKind::Threshold { tau } => {
                m.insert("tau".into(), *tau);
            }
            ModelKind::Voter => {}
            ModelKind::MajorityRule { q } => {
                m.insert("q".into(), *q as f64);
            }
            ModelKind::HegselmannKrause { epsilon } => {
                m.insert("epsilon".into(), *epsilon);
            }
        }
        m
    }

    /// Ordered label list defining the integer coding of reported states.
    pub fn state_labels(&self) -> &'static [&'static str] {
        match self.kind {
            ModelKind::Si { .. } | ModelKind::Sis { .. } => &["S", "I"],
            ModelKind::Sir { .. } => &["S", "I", "R"],
            ModelKind::SeirDt { .. } => &["S", "E", "I", "R"],
            ModelKind::IndependentCascades { .. } => {
                &["inactive", "newly_active", "active_spent"]
            }
            ModelKind::Threshold { .. } => &["inactive", "active"],
            ModelKind::Voter | ModelKind::MajorityRule { .. } => &["opinion_0", "opinion_1"],
            // Continuous opinions reported through the "> 0.5 is active"
            // convention.
            ModelKind::HegselmannKrause { .. } => &["inactive", "active"],
        }
    }

    pub fn iteration_mode(&self) -> IterationMode {
        match self.kind {
            ModelKind::Voter | ModelKind::MajorityRule { .. } => IterationMode::Asynchronous,
            _ => IterationMode::Synchronous,
        }
    }

    pub fn supports_weights(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::Si { .. }
                | ModelKind::Sis { .. }
                | ModelKind::Sir { .. }
                | ModelKind::SeirDt { .. }
                | ModelKind::Threshold { .. }
        )
    }

    /// Models with guaranteed fixed points, eligible for `steps = converge`.
    pub fn supports_convergence(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::IndependentCascades { .. } | ModelKind::Threshold { .. }
        )
    }

    pub fn requires_seeds(&self) -> bool {
        !matches!(self.kind, ModelKind::HegselmannKrause { .. })
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.kind, ModelKind::Threshold { .. })
    }

    pub fn channels(&self) -> &'static [ChannelDesc] {
        const U8: ChannelKind = ChannelKind::U8;
        match self.kind {
            ModelKind::Si { .. } | ModelKind::Sis { .. } => &[ChannelDesc { name: "h", kind: U8 }],
            ModelKind::Sir { .. } => &[
                ChannelDesc { name: "h", kind: U8 },
                ChannelDesc { name: "r", kind: U8 },
            ],
            ModelKind::SeirDt { .. } => &[
                ChannelDesc { name: "e", kind: U8 },
                ChannelDesc { name: "h", kind: U8 },
                ChannelDesc { name: "r", kind: U8 },
            ],
            ModelKind::IndependentCascades { .. } => &[ChannelDesc { name: "a", kind: U8 }],
            ModelKind::Threshold { .. } => &[ChannelDesc { name: "a", kind: U8 }],
            ModelKind::Voter | ModelKind::MajorityRule { .. } => {
                &[ChannelDesc { name: "o", kind: U8 }]
            }
            ModelKind::HegselmannKrause { .. } => &[ChannelDesc {
                name: "o",
                kind: ChannelKind::F64,
            }],
        }
    }

    /// Reject graphs the model cannot run on.
    pub fn validate_graph(&self, g: &CsrGraph) -> Result<()> {
        if g.is_weighted() && !self.supports_weights() {
            return Err(Error::Validation(format!(
                "model {} does not support weighted graphs",
                self.model_id()
            )));
        }
        if let ModelKind::MajorityRule { q } = self.kind {
            if q > g.num_nodes() as u64 {
                return Err(Error::Validation(format!(
                    "majority rule group size q={q} exceeds node count {}",
                    g.num_nodes()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernel execution surface shared by the engine and distributed workers.
// ---------------------------------------------------------------------------

/// A block of target rows over which a kernel runs. For the single-process
/// engine this is a contiguous chunk of the full CSR; for a distributed
/// worker it is the shard's sub-CSR with an explicit owned-target list.
/// `row_ptr` holds absolute offsets into `src`/`weights`.
pub(crate) struct TargetRows<'a> {
    pub row_ptr: &'a [u64],
    pub src: &'a [u64],
    pub weights: Option<&'a [f64]>,
    pub ids: RowIds<'a>,
}

pub(crate) enum RowIds<'a> {
    /// Row i is global node `start + i`.
    Contiguous(u64),
    /// Row i is global node `list[i]` (sorted ascending).
    List(&'a [u64]),
}

impl<'a> TargetRows<'a> {
    pub fn full(g: &'a CsrGraph) -> Self {
        Self {
            row_ptr: g.row_ptr(),
            src: g.src_idx(),
            weights: g.weights(),
            ids: RowIds::Contiguous(0),
        }
    }

    /// Rows `r0..r1` of the full graph.
    pub fn chunk(g: &'a CsrGraph, r0: usize, r1: usize) -> Self {
        Self {
            row_ptr: &g.row_ptr()[r0..=r1],
            src: g.src_idx(),
            weights: g.weights(),
            ids: RowIds::Contiguous(r0 as u64),
        }
    }

    pub fn from_parts(
        row_ptr: &'a [u64],
        src: &'a [u64],
        weights: Option<&'a [f64]>,
        owned: &'a [u64],
    ) -> Self {
        Self {
            row_ptr,
            src,
            weights,
            ids: RowIds::List(owned),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    #[inline]
    pub fn id(&self, row: usize) -> u64 {
        match self.ids {
            RowIds::Contiguous(start) => start + row as u64,
            RowIds::List(list) => list[row],
        }
    }

    /// Local row owning global node `v`, if any.
    #[inline]
    pub fn row_of(&self, v: u64) -> Option<usize> {
        match self.ids {
            RowIds::Contiguous(start) => {
                if v >= start && v < start + self.rows() as u64 {
                    Some((v - start) as usize)
                } else {
                    None
                }
            }
            RowIds::List(list) => list.binary_search(&v).ok(),
        }
    }

    #[inline]
    pub fn edge_range(&self, row: usize) -> std::ops::Range<usize> {
        self.row_ptr[row] as usize..self.row_ptr[row + 1] as usize
    }
}

/// Per-step RNG context. Lane `l` draws with simulation index
/// `sim_offset + l`, keeping keys globally unique across batches.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepCtx {
    pub master_seed: u64,
    pub sim_offset: u32,
    pub step: u32,
    pub lanes: usize,
    pub num_nodes: u64,
}

impl StepCtx {
    #[inline(always)]
    pub fn unif(&self, lane: usize, node: u64, tag: DrawTag) -> f64 {
        uniform(&RngKey {
            master_seed: self.master_seed,
            sim_index: self.sim_offset + lane as u32,
            step: self.step,
            node_id: node,
            draw_tag: tag,
        })
    }

    #[inline(always)]
    pub fn unif_int(&self, lane: usize, node: u64, tag: DrawTag, n: u64) -> u64 {
        uniform_int(
            &RngKey {
                master_seed: self.master_seed,
                sim_index: self.sim_offset + lane as u32,
                step: self.step,
                node_id: node,
                draw_tag: tag,
            },
            n,
        )
    }
}

/// Infection probabilities 1 - exp(c * ln(1-beta)) indexed by transmitter
/// count, built by the exact repeated-addition sequence the naive per-edge
/// sum would produce.
#[derive(Debug, Clone)]
pub(crate) struct TransmissionTable {
    prob: Vec<f64>,
}

impl TransmissionTable {
    pub fn build(beta: f64, max_count: usize) -> Self {
        let lw = (1.0 - beta).ln();
        let mut prob = Vec::with_capacity(max_count + 1);
        let mut acc = 0.0f64;
        prob.push(1.0 - acc.exp());
        for _ in 0..max_count {
            acc += lw;
            prob.push(1.0 - acc.exp());
        }
        Self { prob }
    }

    #[inline(always)]
    pub fn prob(&self, count: u32) -> f64 {
        self.prob[count as usize]
    }
}

/// How transmission contributions are aggregated per target.
pub(crate) enum Transmission<'a> {
    /// Unweighted: count transmitters, look the probability up.
    Counted(&'a TransmissionTable),
    /// Weighted: per-edge contribution `w * ln(1-beta)`, summed in CSR order.
    Weighted { log_one_minus_beta: f64 },
}

/// Count in-neighbors whose channel value equals `want`, per lane.
#[inline]
fn count_transmitters(
    rows: &TargetRows,
    row: usize,
    chan: &[u8],
    want: u8,
    lanes: usize,
    counts: &mut [u32],
) {
    counts[..lanes].fill(0);
    for e in rows.edge_range(row) {
        let j = rows.src[e] as usize;
        let c = &chan[j * lanes..j * lanes + lanes];
        for l in 0..lanes {
            counts[l] += (c[l] == want) as u32;
        }
    }
}

/// Sum `w * ln(1-beta)` over transmitting in-neighbors, per lane, in CSR
/// order. Adding 0.0 for a non-transmitter leaves the sum bit-identical to
/// skipping the edge.
#[inline]
fn sum_weighted_log(
    rows: &TargetRows,
    row: usize,
    chan: &[u8],
    want: u8,
    lanes: usize,
    lw: f64,
    acc: &mut [f64],
) {
    acc[..lanes].fill(0.0);
    let weights = rows.weights.expect("weighted aggregation without weights");
    for e in rows.edge_range(row) {
        let j = rows.src[e] as usize;
        let contrib = weights[e] * lw;
        let c = &chan[j * lanes..j * lanes + lanes];
        for l in 0..lanes {
            acc[l] += if c[l] == want { contrib } else { 0.0 };
        }
    }
}

/// Per-lane infection probabilities for one target row into `probs`.
#[inline]
fn infection_probs(
    rows: &TargetRows,
    row: usize,
    chan: &[u8],
    want: u8,
    trans: &Transmission,
    lanes: usize,
    counts: &mut [u32],
    acc: &mut [f64],
    probs: &mut [f64],
) {
    match trans {
        Transmission::Counted(table) => {
            count_transmitters(rows, row, chan, want, lanes, counts);
            for l in 0..lanes {
                probs[l] = table.prob(counts[l]);
            }
        }
        Transmission::Weighted { log_one_minus_beta } => {
            sum_weighted_log(rows, row, chan, want, lanes, *log_one_minus_beta, acc);
            for l in 0..lanes {
                probs[l] = 1.0 - acc[l].exp();
            }
        }
    }
}

struct Scratch {
    counts: Vec<u32>,
    acc: Vec<f64>,
    probs: Vec<f64>,
}

impl Scratch {
    fn new(lanes: usize) -> Self {
        Self {
            counts: vec![0; lanes],
            acc: vec![0.0; lanes],
            probs: vec![0.0; lanes],
        }
    }
}

// --- synchronous kernels ---------------------------------------------------

pub(crate) fn step_si(
    rows: &TargetRows,
    prev_h: &[u8],
    out_h: &mut [u8],
    ctx: &StepCtx,
    trans: &Transmission,
) {
    let b = ctx.lanes;
    let mut s = Scratch::new(b);
    for i in 0..rows.rows() {
        let v = rows.id(i);
        infection_probs(rows, i, prev_h, 1, trans, b, &mut s.counts, &mut s.acc, &mut s.probs);
        let hv = &prev_h[v as usize * b..v as usize * b + b];
        let out = &mut out_h[i * b..i * b + b];
        for l in 0..b {
            out[l] = if hv[l] == 1 {
                1
            } else {
                let p = s.probs[l];
                (p > 0.0 && ctx.unif(l, v, DrawTag::Infect) < p) as u8
            };
        }
    }
}

pub(crate) fn step_sis(
    rows: &TargetRows,
    prev_h: &[u8],
    out_h: &mut [u8],
    ctx: &StepCtx,
    trans: &Transmission,
    lambda: f64,
) {
    let b = ctx.lanes;
    let mut s = Scratch::new(b);
    for i in 0..rows.rows() {
        let v = rows.id(i);
        infection_probs(rows, i, prev_h, 1, trans, b, &mut s.counts, &mut s.acc, &mut s.probs);
        let hv = &prev_h[v as usize * b..v as usize * b + b];
        let out = &mut out_h[i * b..i * b + b];
        for l in 0..b {
            out[l] = if hv[l] == 1 {
                // Recovery returns the node to S.
                (ctx.unif(l, v, DrawTag::Recover) >= lambda) as u8
            } else {
                let p = s.probs[l];
                (p > 0.0 && ctx.unif(l, v, DrawTag::Infect) < p) as u8
            };
        }
    }
}

pub(crate) fn step_sir(
    rows: &TargetRows,
    prev_h: &[u8],
    prev_r: &[u8],
    out_h: &mut [u8],
    out_r: &mut [u8],
    ctx: &StepCtx,
    trans: &Transmission,
    lambda: f64,
) {
    let b = ctx.lanes;
    let mut s = Scratch::new(b);
    for i in 0..rows.rows() {
        let v = rows.id(i);
        infection_probs(rows, i, prev_h, 1, trans, b, &mut s.counts, &mut s.acc, &mut s.probs);
        let vb = v as usize * b;
        let hv = &prev_h[vb..vb + b];
        let rv = &prev_r[vb..vb + b];
        let oh = &mut out_h[i * b..i * b + b];
        let or = &mut out_r[i * b..i * b + b];
        for l in 0..b {
            if hv[l] == 0 && rv[l] == 0 {
                let p = s.probs[l];
                oh[l] = (p > 0.0 && ctx.unif(l, v, DrawTag::Infect) < p) as u8;
                or[l] = 0;
            } else if hv[l] == 1 {
                let recovered = ctx.unif(l, v, DrawTag::Recover) < lambda;
                oh[l] = !recovered as u8;
                or[l] = recovered as u8;
            } else {
                oh[l] = 0;
                or[l] = rv[l];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step_seir(
    rows: &TargetRows,
    prev_e: &[u8],
    prev_h: &[u8],
    prev_r: &[u8],
    out_e: &mut [u8],
    out_h: &mut [u8],
    out_r: &mut [u8],
    ctx: &StepCtx,
    trans: &Transmission,
    lambda: f64,
    alpha: f64,
) {
    let b = ctx.lanes;
    let mut s = Scratch::new(b);
    for i in 0..rows.rows() {
        let v = rows.id(i);
        // Only infectious (I-state) neighbors transmit.
        infection_probs(rows, i, prev_h, 1, trans, b, &mut s.counts, &mut s.acc, &mut s.probs);
        let vb = v as usize * b;
        let ev = &prev_e[vb..vb + b];
        let hv = &prev_h[vb..vb + b];
        let rv = &prev_r[vb..vb + b];
        let oe = &mut out_e[i * b..i * b + b];
        let oh = &mut out_h[i * b..i * b + b];
        let or = &mut out_r[i * b..i * b + b];
        for l in 0..b {
            if ev[l] == 0 && hv[l] == 0 && rv[l] == 0 {
                let p = s.probs[l];
                oe[l] = (p > 0.0 && ctx.unif(l, v, DrawTag::Infect) < p) as u8;
                oh[l] = 0;
                or[l] = 0;
            } else if ev[l] == 1 {
                let progressed = ctx.unif(l, v, DrawTag::Latent) < alpha;
                oe[l] = !progressed as u8;
                oh[l] = progressed as u8;
                or[l] = 0;
            } else if hv[l] == 1 {
                let recovered = ctx.unif(l, v, DrawTag::Recover) < lambda;
                oe[l] = 0;
                oh[l] = !recovered as u8;
                or[l] = recovered as u8;
            } else {
                oe[l] = 0;
                oh[l] = 0;
                or[l] = rv[l];
            }
        }
    }
}

pub(crate) const IC_INACTIVE: u8 = 0;
pub(crate) const IC_NEWLY_ACTIVE: u8 = 1;
pub(crate) const IC_SPENT: u8 = 2;

pub(crate) fn step_ic(
    rows: &TargetRows,
    prev_a: &[u8],
    out_a: &mut [u8],
    ctx: &StepCtx,
    trans: &Transmission,
) {
    let b = ctx.lanes;
    let mut s = Scratch::new(b);
    for i in 0..rows.rows() {
        let v = rows.id(i);
        // Only newly active sources get their one activation attempt.
        infection_probs(
            rows,
            i,
            prev_a,
            IC_NEWLY_ACTIVE,
            trans,
            b,
            &mut s.counts,
            &mut s.acc,
            &mut s.probs,
        );
        let av = &prev_a[v as usize * b..v as usize * b + b];
        let out = &mut out_a[i * b..i * b + b];
        for l in 0..b {
            out[l] = match av[l] {
                IC_INACTIVE => {
                    let p = s.probs[l];
                    if p > 0.0 && ctx.unif(l, v, DrawTag::Infect) < p {
                        IC_NEWLY_ACTIVE
                    } else {
                        IC_INACTIVE
                    }
                }
                _ => IC_SPENT,
            };
        }
    }
}

pub(crate) fn step_threshold(
    rows: &TargetRows,
    prev_a: &[u8],
    out_a: &mut [u8],
    lanes: usize,
    tau: f64,
) {
    let b = lanes;
    let mut active_w = vec![0.0f64; b];
    for i in 0..rows.rows() {
        let v = rows.id(i);
        let av = &prev_a[v as usize * b..v as usize * b + b];
        let out = &mut out_a[i * b..i * b + b];
        active_w[..b].fill(0.0);
        let mut total_w = 0.0f64;
        for e in rows.edge_range(i) {
            let j = rows.src[e] as usize;
            let w = rows.weights.map_or(1.0, |ws| ws[e]);
            total_w += w;
            let c = &prev_a[j * b..j * b + b];
            for l in 0..b {
                active_w[l] += if c[l] == 1 { w } else { 0.0 };
            }
        }
        for l in 0..b {
            // Activation on equality; zero in-degree nodes never activate.
            out[l] = (av[l] == 1 || (total_w > 0.0 && active_w[l] / total_w >= tau)) as u8;
        }
    }
}

pub(crate) fn step_hk(
    rows: &TargetRows,
    prev_o: &[f64],
    out_o: &mut [f64],
    lanes: usize,
    epsilon: f64,
) {
    let b = lanes;
    let mut sum_c = vec![0.0f64; b];
    let mut sum_v = vec![0.0f64; b];
    for i in 0..rows.rows() {
        let v = rows.id(i);
        let ov = &prev_o[v as usize * b..v as usize * b + b];
        let out = &mut out_o[i * b..i * b + b];
        sum_c[..b].fill(0.0);
        sum_v[..b].fill(0.0);
        for e in rows.edge_range(i) {
            let j = rows.src[e] as usize;
            let oj = &prev_o[j * b..j * b + b];
            for l in 0..b {
                // Strict inequality: neighbors exactly epsilon apart are
                // excluded.
                let within = (ov[l] - oj[l]).abs() < epsilon;
                sum_c[l] += if within { oj[l] } else { 0.0 };
                sum_v[l] += if within { 1.0 } else { 0.0 };
            }
        }
        for l in 0..b {
            out[l] = if sum_v[l] > 0.0 {
                sum_c[l] / sum_v[l]
            } else {
                ov[l]
            };
        }
    }
}

// --- asynchronous kernels --------------------------------------------------
//
// Each lane independently selects its update target(s). The selection draw
// is keyed by node_id = 0; every worker can recompute it, and only the owner
// of the selected node applies the update. Callers must have copied the
// previous values of all owned rows into `out` before applying.

/// Voter: one node per lane adopts the opinion of a uniformly chosen
/// in-neighbor. The neighbor draw is keyed by node_id = 1 + v, which cannot
/// collide with the selection key at node_id = 0.
pub(crate) fn apply_voter(rows: &TargetRows, prev_o: &[u8], out_o: &mut [u8], ctx: &StepCtx) {
    let b = ctx.lanes;
    for l in 0..b {
        let v = ctx.unif_int(l, 0, DrawTag::NodePick, ctx.num_nodes);
        let Some(row) = rows.row_of(v) else {
            continue;
        };
        let seg = rows.edge_range(row);
        let deg = seg.len() as u64;
        if deg == 0 {
            continue;
        }
        let pick = ctx.unif_int(l, 1 + v, DrawTag::NodePick, deg) as usize;
        let j = rows.src[seg.start + pick] as usize;
        out_o[row * b + l] = prev_o[j * b + l];
    }
}

/// Majority rule: q distinct nodes per lane adopt the group majority.
/// Sampling attempts are keyed by node_id = N + 1 + attempt so they cannot
/// collide with the tie-break key at node_id = N.
pub(crate) fn apply_majority(
    rows: &TargetRows,
    prev_o: &[u8],
    out_o: &mut [u8],
    ctx: &StepCtx,
    q: u64,
) {
    let b = ctx.lanes;
    let n = ctx.num_nodes;
    let mut group: Vec<u64> = Vec::with_capacity(q as usize);
    for l in 0..b {
        group.clear();
        let mut attempt: u64 = 0;
        while (group.len() as u64) < q {
            let c = ctx.unif_int(l, n + 1 + attempt, DrawTag::NodePick, n);
            attempt += 1;
            if !group.contains(&c) {
                group.push(c);
            }
        }
        let ones: u64 = group
            .iter()
            .map(|&m| (prev_o[m as usize * b + l] == 1) as u64)
            .sum();
        let majority = if 2 * ones > q {
            1u8
        } else if 2 * ones == q {
            // Exact tie (even q): seeded coin, toward 1 below 0.5.
            (ctx.unif(l, n, DrawTag::NodePick) < 0.5) as u8
        } else {
            0u8
        };
        for &m in &group {
            if let Some(row) = rows.row_of(m) {
                out_o[row * b + l] = majority;
            }
        }
    }
}

// --- initial states ----------------------------------------------------------

/// Mutable view of one channel buffer during initialization.
pub(crate) enum ChannelSliceMut<'a> {
    U8(&'a mut [u8]),
    F64(&'a mut [f64]),
}

/// Fill zero-initialized channel buffers (layout `node * lanes + lane`) with
/// the model's initial-state rule. Discrete models mark seeds in every lane
/// identically; HK draws per-lane opinions in [-1, 1] with OPINION_INIT keys
/// at step 0.
pub(crate) fn init_state(
    spec: &ModelSpec,
    num_nodes: usize,
    seeds: &[u64],
    lanes: usize,
    sim_offset: u32,
    master_seed: u64,
    bufs: &mut [ChannelSliceMut],
) -> Result<()> {
    if spec.requires_seeds() && seeds.is_empty() {
        return Err(Error::Validation(format!(
            "model {} requires a non-empty seed set",
            spec.model_id()
        )));
    }
    match spec.kind {
        ModelKind::Si { .. }
        | ModelKind::Sis { .. }
        | ModelKind::Sir { .. }
        | ModelKind::IndependentCascades { .. }
        | ModelKind::Threshold { .. }
        | ModelKind::Voter
        | ModelKind::MajorityRule { .. } => {
            // First channel marks seeds (infected / newly active / opinion 1).
            let ChannelSliceMut::U8(first) = &mut bufs[0] else {
                return Err(Error::Contract("expected u8 channel".into()));
            };
            for &s in seeds {
                first[s as usize * lanes..s as usize * lanes + lanes].fill(1);
            }
        }
        ModelKind::SeirDt { .. } => {
            // Seeds start infectious: channel order is (e, h, r).
            let (_, rest) = bufs.split_at_mut(1);
            let ChannelSliceMut::U8(h) = &mut rest[0] else {
                return Err(Error::Contract("expected u8 channel".into()));
            };
            for &s in seeds {
                h[s as usize * lanes..s as usize * lanes + lanes].fill(1);
            }
        }
        ModelKind::HegselmannKrause { .. } => {
            let ChannelSliceMut::F64(o) = &mut bufs[0] else {
                return Err(Error::Contract("expected f64 channel".into()));
            };
            for v in 0..num_nodes {
                for l in 0..lanes {
                    let u = uniform(&RngKey {
                        master_seed,
                        sim_index: sim_offset + l as u32,
                        step: 0,
                        node_id: v as u64,
                        draw_tag: DrawTag::OpinionInit,
                    });
                    o[v * lanes + l] = 2.0 * u - 1.0;
                }
            }
        }
    }
    Ok(())
}

// --- label decoding ----------------------------------------------------------

/// Decoded label of one (node, lane) cell.
#[inline(always)]
pub(crate) fn decode_cell(spec: &ModelSpec, chans: &[ChannelSliceRef], idx: usize) -> u8 {
    match spec.kind {
        ModelKind::Si { .. } | ModelKind::Sis { .. } => chans[0].u8(idx),
        ModelKind::Sir { .. } => {
            let h = chans[0].u8(idx);
            let r = chans[1].u8(idx);
            if r == 1 {
                2
            } else {
                h
            }
        }
        ModelKind::SeirDt { .. } => {
            let e = chans[0].u8(idx);
            let h = chans[1].u8(idx);
            let r = chans[2].u8(idx);
            if r == 1 {
                3
            } else if h == 1 {
                2
            } else {
                e
            }
        }
        ModelKind::IndependentCascades { .. }
        | ModelKind::Threshold { .. }
        | ModelKind::Voter
        | ModelKind::MajorityRule { .. } => chans[0].u8(idx),
        ModelKind::HegselmannKrause { .. } => (chans[0].f64(idx) > 0.5) as u8,
    }
}

/// Immutable view of one channel buffer.
#[derive(Clone, Copy)]
pub(crate) enum ChannelSliceRef<'a> {
    U8(&'a [u8]),
    F64(&'a [f64]),
}

impl<'a> ChannelSliceRef<'a> {
    #[inline(always)]
    fn u8(&self, idx: usize) -> u8 {
        match self {
            ChannelSliceRef::U8(s) => s[idx],
            ChannelSliceRef::F64(_) => unreachable!("u8 access on f64 channel"),
        }
    }

    #[inline(always)]
    fn f64(&self, idx: usize) -> f64 {
        match self {
            ChannelSliceRef::F64(s) => s[idx],
            ChannelSliceRef::U8(_) => unreachable!("f64 access on u8 channel"),
        }
    }
}

/// Per-lane label counts over all nodes; `out` has `lanes * labels` entries,
/// lane-major.
pub(crate) fn count_labels(
    spec: &ModelSpec,
    chans: &[ChannelSliceRef],
    num_nodes: usize,
    lanes: usize,
    out: &mut [u64],
) {
    let n_labels = spec.state_labels().len();
    out[..lanes * n_labels].fill(0);
    for v in 0..num_nodes {
        for l in 0..lanes {
            let label = decode_cell(spec, chans, v * lanes + l) as usize;
            out[l * n_labels + label] += 1;
        }
    }
}

/// Decoded per-node labels of one lane.
pub(crate) fn decode_lane(
    spec: &ModelSpec,
    chans: &[ChannelSliceRef],
    num_nodes: usize,
    lanes: usize,
    lane: usize,
) -> Vec<u8> {
    (0..num_nodes)
        .map(|v| decode_cell(spec, chans, v * lanes + lane))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_validation() {
        assert!(ModelSpec::new(ModelKind::Sir {
            beta: 0.5,
            lambda: 0.1
        })
        .is_ok());
        assert!(ModelSpec::new(ModelKind::Sir {
            beta: 1.5,
            lambda: 0.1
        })
        .is_err());
        assert!(ModelSpec::new(ModelKind::HegselmannKrause { epsilon: 0.0 }).is_err());
        assert!(ModelSpec::new(ModelKind::MajorityRule { q: 0 }).is_err());
    }

    #[test]
    fn name_params_round_trip() {
        let mut params = BTreeMap::new();
        params.insert("beta".to_string(), 0.01);
        params.insert("lambda".to_string(), 0.005);
        let spec = ModelSpec::from_name_params("sir", &params).unwrap();
        assert_eq!(spec.model_id(), "sir");
        assert_eq!(spec.params(), params);

        params.insert("bogus".to_string(), 1.0);
        assert!(matches!(
            ModelSpec::from_name_params("sir", &params),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ModelSpec::from_name_params("nope", &BTreeMap::new()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ModelSpec::from_name_params("sir", &BTreeMap::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weighted_rejection_follows_support_table() {
        let edges = [(0u64, 1u64), (1, 0)];
        let ws = [1.0, 1.0];
        let weighted = CsrGraph::from_edges(2, &edges, Some(&ws), true).unwrap();
        let ic = ModelSpec::new(ModelKind::IndependentCascades { p: 0.5 }).unwrap();
        assert!(ic.validate_graph(&weighted).is_err());
        let thr = ModelSpec::new(ModelKind::Threshold { tau: 0.5 }).unwrap();
        assert!(thr.validate_graph(&weighted).is_ok());
        let sir = ModelSpec::new(ModelKind::Sir {
            beta: 0.1,
            lambda: 0.1,
        })
        .unwrap();
        assert!(sir.validate_graph(&weighted).is_ok());
    }

    #[test]
    fn majority_rule_group_size_vs_graph() {
        let edges = [(0u64, 1u64)];
        let g = CsrGraph::from_edges(2, &edges, None, true).unwrap();
        let ok = ModelSpec::new(ModelKind::MajorityRule { q: 2 }).unwrap();
        assert!(ok.validate_graph(&g).is_ok());
        let too_big = ModelSpec::new(ModelKind::MajorityRule { q: 3 }).unwrap();
        assert!(too_big.validate_graph(&g).is_err());
    }

    #[test]
    fn transmission_table_limits() {
        let t = TransmissionTable::build(0.0, 4);
        for c in 0..=4 {
            assert_eq!(t.prob(c), 0.0);
        }
        let t = TransmissionTable::build(1.0, 4);
        assert_eq!(t.prob(0), 0.0);
        for c in 1..=4 {
            assert_eq!(t.prob(c), 1.0);
        }
        // 2 transmitters at beta = 0.5: 1 - 0.25.
        let t = TransmissionTable::build(0.5, 2);
        assert!((t.prob(2) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn table_matches_sequential_addition() {
        let beta = 0.317f64;
        let lw = (1.0 - beta).ln();
        let t = TransmissionTable::build(beta, 50);
        let mut acc = 0.0f64;
        for c in 0..=50u32 {
            assert_eq!(t.prob(c).to_bits(), (1.0 - acc.exp()).to_bits());
            acc += lw;
        }
    }

    #[test]
    fn hk_two_nodes_exchange_without_self_loops() {
        // Self-opinion is excluded unless a self-loop edge exists, so two
        // mutually linked nodes at -0.1 and 0.1 adopt each other's opinion.
        let edges = [(0u64, 1u64), (1, 0)];
        let g = CsrGraph::from_edges(2, &edges, None, false).unwrap();
        let rows = TargetRows::full(&g);
        let prev = vec![-0.1, 0.1];
        let mut out = vec![0.0; 2];
        step_hk(&rows, &prev, &mut out, 1, 0.32);
        assert_eq!(out, vec![0.1, -0.1]);
        let mut out2 = vec![0.0; 2];
        step_hk(&rows, &out, &mut out2, 1, 0.32);
        assert_eq!(out2, vec![-0.1, 0.1]);
    }

    #[test]
    fn hk_with_self_loops_meets_in_middle() {
        // With explicit self-loops both nodes average to 0 in one step.
        let edges = [(0u64, 1u64), (1, 0), (0, 0), (1, 1)];
        let g = CsrGraph::from_edges(2, &edges, None, true).unwrap();
        let rows = TargetRows::full(&g);
        let prev = vec![-0.1, 0.1];
        let mut out = vec![9.0; 2];
        step_hk(&rows, &prev, &mut out, 1, 0.32);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn hk_strict_epsilon_excludes_boundary() {
        let edges = [(0u64, 1u64), (1, 0)];
        let g = CsrGraph::from_edges(2, &edges, None, false).unwrap();
        let rows = TargetRows::full(&g);
        let prev = vec![0.0, 0.32];
        let mut out = vec![9.0; 2];
        step_hk(&rows, &prev, &mut out, 1, 0.32);
        // |diff| == epsilon: no epsilon-neighbors, opinions unchanged.
        assert_eq!(out, prev);
    }

    #[test]
    fn threshold_boundary_activates_on_equality() {
        // Node 2 has in-neighbors {0, 1}, one active: fraction 0.5 >= tau 0.5.
        let edges = [(0u64, 2u64), (1, 2)];
        let g = CsrGraph::from_edges(3, &edges, None, true).unwrap();
        let rows = TargetRows::full(&g);
        let prev = vec![1u8, 0, 0];
        let mut out = vec![0u8; 3];
        step_threshold(&rows, &prev, &mut out, 1, 0.5);
        assert_eq!(out, vec![1, 0, 1]);
        // tau = 0: every node with an in-edge activates; isolated targets never.
        let mut out = vec![0u8; 3];
        step_threshold(&rows, &vec![0u8, 0, 0], &mut out, 1, 0.0);
        assert_eq!(out, vec![0, 0, 1]);
    }

    #[test]
    fn voter_consensus_is_absorbing() {
        let edges = [(0u64, 1u64), (1, 0)];
        let g = CsrGraph::from_edges(2, &edges, None, true).unwrap();
        let rows = TargetRows::full(&g);
        let prev = vec![1u8, 1];
        let mut out = prev.clone();
        for step in 1..20 {
            let ctx = StepCtx {
                master_seed: 5,
                sim_offset: 0,
                step,
                lanes: 1,
                num_nodes: 2,
            };
            apply_voter(&rows, &prev, &mut out, &ctx);
            assert_eq!(out, prev);
        }
    }

    #[test]
    fn majority_all_zero_group_stays_zero() {
        let edges = [(0u64, 1u64)];
        let g = CsrGraph::from_edges(4, &edges, None, true).unwrap();
        let rows = TargetRows::full(&g);
        let prev = vec![0u8; 4];
        let mut out = prev.clone();
        for step in 1..10 {
            let ctx = StepCtx {
                master_seed: 9,
                sim_offset: 3,
                step,
                lanes: 1,
                num_nodes: 4,
            };
            apply_majority(&rows, &prev, &mut out, &ctx, 3);
            assert_eq!(out, prev);
        }
    }

    #[test]
    fn seir_alpha_one_is_one_step_delay() {
        // E always progresses to I on the next step when alpha = 1.
        let edges = [(0u64, 1u64)];
        let g = CsrGraph::from_edges(2, &edges, None, true).unwrap();
        let rows = TargetRows::full(&g);
        let prev_e = vec![0u8, 1];
        let prev_h = vec![0u8, 0];
        let prev_r = vec![0u8, 0];
        let (mut oe, mut oh, mut or) = (vec![0u8; 2], vec![0u8; 2], vec![0u8; 2]);
        let ctx = StepCtx {
            master_seed: 1,
            sim_offset: 0,
            step: 1,
            lanes: 1,
            num_nodes: 2,
        };
        let table = TransmissionTable::build(0.0, 1);
        step_seir(
            &rows,
            &prev_e,
            &prev_h,
            &prev_r,
            &mut oe,
            &mut oh,
            &mut or,
            &ctx,
            &Transmission::Counted(&table),
            0.0,
            1.0,
        );
        assert_eq!((oe[1], oh[1], or[1]), (0, 1, 0));
    }

    #[test]
    fn labels_decode() {
        let spec = ModelSpec::new(ModelKind::Sir {
            beta: 0.1,
            lambda: 0.1,
        })
        .unwrap();
        let h = vec![0u8, 1, 0];
        let r = vec![0u8, 0, 1];
        let chans = [ChannelSliceRef::U8(&h), ChannelSliceRef::U8(&r)];
        let labels = decode_lane(&spec, &chans, 3, 1, 0);
        assert_eq!(labels, vec![0, 1, 2]);

        let hk = ModelSpec::new(ModelKind::HegselmannKrause { epsilon: 0.3 }).unwrap();
        let o = vec![0.4, 0.6];
        let chans = [ChannelSliceRef::F64(&o)];
        assert_eq!(decode_lane(&hk, &chans, 2, 1, 0), vec![0, 1]);
    }
}
