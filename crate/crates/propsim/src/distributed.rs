//! Multi-worker simulation over saved partitions.
//!
//! Bulk-synchronous: each step every worker computes the updates of its
//! owned targets from the shared previous-step snapshot, using exactly the
//! RNG keys the single-process engine would use for those nodes. Workers
//! send their owned slices as [`SyncMessage`]s; the coordinator assembles
//! the next snapshot by placing the disjoint blocks (no arithmetic
//! reduction) and broadcasts it. The final [`EpochResults`] is bit-identical
//! to the single-process `run_epochs` with the same arguments.
//!
//! Two transports: in-process channels between worker threads, and
//! length-prefixed binary frames over local stream sockets carrying the same
//! message encoding. Per step, the gathered payloads total exactly
//! `lanes * N * channel-count` values, independent of the edge count.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;

use crate::engine::{
    ChannelBuf, ChannelSet, EngineOptions, EpochAccumulator, EpochResults, StepBudget,
};
use crate::error::{Error, Result};
use crate::graph::SeedSet;
use crate::models::{
    self, ChannelKind, ChannelSliceMut, ModelKind, ModelSpec, StepCtx, TargetRows,
    TransmissionTable,
};
use crate::partition::{load_manifest, load_partition, Partition};

/// One worker's updated owned-target block for one step. `lane_lo..lane_hi`
/// are absolute simulation indices; payload layout is row-major, lane-minor,
/// rows ordered like the shard's owned-target list.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncMessage {
    pub step: u32,
    pub part: u16,
    pub lane_lo: u32,
    pub lane_hi: u32,
    pub payloads: Vec<ChannelPayload>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPayload {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl ChannelPayload {
    pub fn value_count(&self) -> usize {
        match self {
            ChannelPayload::U8(v) => v.len(),
            ChannelPayload::F64(v) => v.len(),
        }
    }
}

impl SyncMessage {
    pub fn value_count(&self) -> u64 {
        self.payloads.iter().map(|p| p.value_count() as u64).sum()
    }

    pub fn lanes(&self) -> usize {
        (self.lane_hi - self.lane_lo) as usize
    }
}

/// Place disjoint owned blocks into a fresh global state. `owned_by_part`
/// maps shard index (1-based) minus one to its owned-target list. Orders do
/// not matter: the blocks are disjoint by construction, and any overlap or
/// coverage gap is a protocol error.
pub fn merge_states(
    messages: &[SyncMessage],
    owned_by_part: &[Vec<u64>],
    num_nodes: usize,
) -> Result<Vec<ChannelPayload>> {
    let first = messages
        .first()
        .ok_or_else(|| Error::Protocol("no messages to merge".into()))?;
    let lanes = first.lanes();
    let n_channels = first.payloads.len();
    let mut covered = vec![false; num_nodes];
    let mut out: Vec<ChannelPayload> = first
        .payloads
        .iter()
        .map(|p| match p {
            ChannelPayload::U8(_) => ChannelPayload::U8(vec![0; num_nodes * lanes]),
            ChannelPayload::F64(_) => ChannelPayload::F64(vec![0.0; num_nodes * lanes]),
        })
        .collect();
    for msg in messages {
        if msg.step != first.step || msg.lane_lo != first.lane_lo || msg.lane_hi != first.lane_hi {
            return Err(Error::Protocol(format!(
                "message from part {} disagrees on step/lane range",
                msg.part
            )));
        }
        if msg.payloads.len() != n_channels {
            return Err(Error::Protocol(format!(
                "message from part {} has {} channels, expected {n_channels}",
                msg.part,
                msg.payloads.len()
            )));
        }
        let owned = owned_by_part
            .get(msg.part as usize - 1)
            .ok_or_else(|| Error::Protocol(format!("unknown partition index {}", msg.part)))?;
        for p in &msg.payloads {
            if p.value_count() != owned.len() * lanes {
                return Err(Error::Protocol(format!(
                    "payload from part {} has {} values, expected {}",
                    msg.part,
                    p.value_count(),
                    owned.len() * lanes
                )));
            }
        }
        for (row, &target) in owned.iter().enumerate() {
            let t = target as usize;
            if t >= num_nodes {
                return Err(Error::Protocol(format!(
                    "part {} owns out-of-range target {target}",
                    msg.part
                )));
            }
            if covered[t] {
                return Err(Error::Protocol(format!(
                    "target {target} updated by more than one partition"
                )));
            }
            covered[t] = true;
            for (chan, payload) in out.iter_mut().zip(&msg.payloads) {
                match (chan, payload) {
                    (ChannelPayload::U8(dst), ChannelPayload::U8(src)) => {
                        dst[t * lanes..(t + 1) * lanes]
                            .copy_from_slice(&src[row * lanes..(row + 1) * lanes]);
                    }
                    (ChannelPayload::F64(dst), ChannelPayload::F64(src)) => {
                        dst[t * lanes..(t + 1) * lanes]
                            .copy_from_slice(&src[row * lanes..(row + 1) * lanes]);
                    }
                    _ => {
                        return Err(Error::Protocol(format!(
                            "channel kind mismatch in message from part {}",
                            msg.part
                        )))
                    }
                }
            }
        }
    }
    if let Some(missing) = covered.iter().position(|&c| !c) {
        return Err(Error::Protocol(format!(
            "target {missing} not covered by any partition"
        )));
    }
    Ok(out)
}

fn payloads_into_channel_set(payloads: Vec<ChannelPayload>, nodes: usize, lanes: usize) -> ChannelSet {
    ChannelSet {
        nodes,
        lanes,
        bufs: payloads
            .into_iter()
            .map(|p| match p {
                ChannelPayload::U8(v) => ChannelBuf::U8(v),
                ChannelPayload::F64(v) => ChannelBuf::F64(v),
            })
            .collect(),
    }
}

fn channel_set_to_payloads(set: &ChannelSet) -> Vec<ChannelPayload> {
    set.bufs
        .iter()
        .map(|b| match b {
            ChannelBuf::U8(v) => ChannelPayload::U8(v.clone()),
            ChannelBuf::F64(v) => ChannelPayload::F64(v.clone()),
        })
        .collect()
}

/// Transport used between the coordinator and its workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transport {
    #[default]
    InProcess,
    /// Length-prefixed frames over loopback TCP; same message encoding.
    LocalSocket,
}

#[derive(Debug, Clone)]
pub struct DistributedOptions {
    pub engine: EngineOptions,
    pub transport: Transport,
}

impl Default for DistributedOptions {
    fn default() -> Self {
        Self {
            engine: EngineOptions::default(),
            transport: Transport::InProcess,
        }
    }
}

/// Measured synchronization payload sizes (values gathered from workers).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrafficReport {
    /// (lanes, gathered values) per executed step, across all passes.
    pub per_step: Vec<(u32, u64)>,
}

impl TrafficReport {
    pub fn total_values(&self) -> u64 {
        self.per_step.iter().map(|&(_, v)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedRun {
    pub results: EpochResults,
    pub traffic: TrafficReport,
}

/// Per-worker state: the shard plus the model runtime for its rows.
struct WorkerCtx {
    spec: ModelSpec,
    part: Partition,
    master_seed: u64,
    num_nodes: u64,
    table: Option<TransmissionTable>,
}

impl WorkerCtx {
    fn new(spec: &ModelSpec, part: Partition, master_seed: u64) -> Self {
        let num_nodes = part.global_num_nodes;
        let beta = match *spec.kind() {
            ModelKind::Si { beta }
            | ModelKind::Sis { beta, .. }
            | ModelKind::Sir { beta, .. }
            | ModelKind::SeirDt { beta, .. } => Some(beta),
            ModelKind::IndependentCascades { p } => Some(p),
            _ => None,
        };
        let table = match beta {
            Some(b) if part.weights.is_none() => {
                let max_deg = part
                    .row_ptr
                    .windows(2)
                    .map(|w| w[1] - w[0])
                    .max()
                    .unwrap_or(0);
                Some(TransmissionTable::build(b, max_deg as usize))
            }
            _ => None,
        };
        Self {
            spec: spec.clone(),
            part,
            master_seed,
            num_nodes,
            table,
        }
    }

    fn rows(&self) -> TargetRows<'_> {
        TargetRows::from_parts(
            &self.part.row_ptr,
            &self.part.src_idx,
            self.part.weights.as_deref(),
            &self.part.owned_targets,
        )
    }

    /// Compute this worker's owned-target updates for one step.
    fn step(&self, snapshot: &ChannelSet, step: u32, lane_lo: u32, lane_hi: u32) -> SyncMessage {
        let lanes = (lane_hi - lane_lo) as usize;
        let ctx = StepCtx {
            master_seed: self.master_seed,
            sim_offset: lane_lo,
            step,
            lanes,
            num_nodes: self.num_nodes,
        };
        let rows = self.rows();
        let n_rows = rows.rows();
        let cells = n_rows * lanes;
        let trans = self.table.as_ref().map(models::Transmission::Counted);
        let weighted = |beta: f64| models::Transmission::Weighted {
            log_one_minus_beta: (1.0 - beta).ln(),
        };
        let mut payloads: Vec<ChannelPayload> = Vec::new();
        match *self.spec.kind() {
            ModelKind::Si { beta } => {
                let mut out = vec![0u8; cells];
                let t = trans.unwrap_or_else(|| weighted(beta));
                models::step_si(&rows, snapshot.bufs[0].u8(), &mut out, &ctx, &t);
                payloads.push(ChannelPayload::U8(out));
            }
            ModelKind::Sis { beta, lambda } => {
                let mut out = vec![0u8; cells];
                let t = trans.unwrap_or_else(|| weighted(beta));
                models::step_sis(&rows, snapshot.bufs[0].u8(), &mut out, &ctx, &t, lambda);
                payloads.push(ChannelPayload::U8(out));
            }
            ModelKind::Sir { beta, lambda } => {
                let mut oh = vec![0u8; cells];
                let mut or = vec![0u8; cells];
                let t = trans.unwrap_or_else(|| weighted(beta));
                models::step_sir(
                    &rows,
                    snapshot.bufs[0].u8(),
                    snapshot.bufs[1].u8(),
                    &mut oh,
                    &mut or,
                    &ctx,
                    &t,
                    lambda,
                );
                payloads.push(ChannelPayload::U8(oh));
                payloads.push(ChannelPayload::U8(or));
            }
            ModelKind::SeirDt {
                beta,
                lambda,
                alpha,
            } => {
                let mut oe = vec![0u8; cells];
                let mut oh = vec![0u8; cells];
                let mut or = vec![0u8; cells];
                let t = trans.unwrap_or_else(|| weighted(beta));
                models::step_seir(
                    &rows,
                    snapshot.bufs[0].u8(),
                    snapshot.bufs[1].u8(),
                    snapshot.bufs[2].u8(),
                    &mut oe,
                    &mut oh,
                    &mut or,
                    &ctx,
                    &t,
                    lambda,
                    alpha,
                );
                payloads.push(ChannelPayload::U8(oe));
                payloads.push(ChannelPayload::U8(oh));
                payloads.push(ChannelPayload::U8(or));
            }
            ModelKind::IndependentCascades { p } => {
                let mut out = vec![0u8; cells];
                let t = trans.unwrap_or_else(|| weighted(p));
                models::step_ic(&rows, snapshot.bufs[0].u8(), &mut out, &ctx, &t);
                payloads.push(ChannelPayload::U8(out));
            }
            ModelKind::Threshold { tau } => {
                let mut out = vec![0u8; cells];
                models::step_threshold(&rows, snapshot.bufs[0].u8(), &mut out, lanes, tau);
                payloads.push(ChannelPayload::U8(out));
            }
            ModelKind::HegselmannKrause { epsilon } => {
                let mut out = vec![0.0f64; cells];
                models::step_hk(&rows, snapshot.bufs[0].f64(), &mut out, lanes, epsilon);
                payloads.push(ChannelPayload::F64(out));
            }
            ModelKind::Voter => {
                let mut out = copy_owned_rows(snapshot.bufs[0].u8(), &self.part, lanes);
                models::apply_voter(&rows, snapshot.bufs[0].u8(), &mut out, &ctx);
                payloads.push(ChannelPayload::U8(out));
            }
            ModelKind::MajorityRule { q } => {
                let mut out = copy_owned_rows(snapshot.bufs[0].u8(), &self.part, lanes);
                models::apply_majority(&rows, snapshot.bufs[0].u8(), &mut out, &ctx, q);
                payloads.push(ChannelPayload::U8(out));
            }
        }
        SyncMessage {
            step,
            part: self.part.index as u16,
            lane_lo,
            lane_hi,
            payloads,
        }
    }
}

fn copy_owned_rows(global: &[u8], part: &Partition, lanes: usize) -> Vec<u8> {
    let mut out = vec![0u8; part.num_rows() * lanes];
    for (row, &t) in part.owned_targets.iter().enumerate() {
        let t = t as usize;
        out[row * lanes..(row + 1) * lanes].copy_from_slice(&global[t * lanes..(t + 1) * lanes]);
    }
    out
}

enum Job {
    Step {
        snapshot: Arc<ChannelSet>,
        step: u32,
        lane_lo: u32,
        lane_hi: u32,
    },
    Finish,
}

/// Links the coordinator to one worker, hiding the transport.
trait WorkerLink {
    fn dispatch(&mut self, snapshot: &Arc<ChannelSet>, step: u32, lane_lo: u32, lane_hi: u32)
        -> Result<()>;
    fn collect(&mut self) -> Result<SyncMessage>;
    fn finish(&mut self);
}

struct InProcessLink {
    jobs: mpsc::Sender<Job>,
    replies: mpsc::Receiver<SyncMessage>,
}

impl WorkerLink for InProcessLink {
    fn dispatch(
        &mut self,
        snapshot: &Arc<ChannelSet>,
        step: u32,
        lane_lo: u32,
        lane_hi: u32,
    ) -> Result<()> {
        self.jobs
            .send(Job::Step {
                snapshot: Arc::clone(snapshot),
                step,
                lane_lo,
                lane_hi,
            })
            .map_err(|_| Error::Protocol("worker exited before the run finished".into()))
    }

    fn collect(&mut self) -> Result<SyncMessage> {
        self.replies
            .recv()
            .map_err(|_| Error::Protocol("worker failed mid-run".into()))
    }

    fn finish(&mut self) {
        let _ = self.jobs.send(Job::Finish);
    }
}

struct SocketLink {
    stream: TcpStream,
    channel_kinds: Vec<ChannelKind>,
    owned_rows: usize,
}

impl WorkerLink for SocketLink {
    fn dispatch(
        &mut self,
        snapshot: &Arc<ChannelSet>,
        step: u32,
        lane_lo: u32,
        lane_hi: u32,
    ) -> Result<()> {
        // Broadcast the merged global state as a frame with the sentinel
        // part index.
        let msg = SyncMessage {
            step,
            part: u16::MAX,
            lane_lo,
            lane_hi,
            payloads: channel_set_to_payloads(snapshot),
        };
        write_frame(&mut self.stream, &msg)
            .map_err(|e| Error::Protocol(format!("socket send failed: {e}")))
    }

    fn collect(&mut self) -> Result<SyncMessage> {
        read_frame(&mut self.stream, &self.channel_kinds, self.owned_rows)
            .map_err(|e| Error::Protocol(format!("socket receive failed: {e}")))?
            .ok_or_else(|| Error::Protocol("worker closed the connection mid-run".into()))
    }

    fn finish(&mut self) {
        let _ = self.stream.write_all(&0u32.to_le_bytes());
    }
}

// Frame encoding: u32 payload length, then {u32 step, u16 part, u32 lane_lo,
// u32 lane_hi, channel payloads little-endian}. A zero-length frame is the
// shutdown signal.

fn write_frame(w: &mut impl Write, msg: &SyncMessage) -> std::io::Result<()> {
    let mut body = Vec::with_capacity(16 + msg.value_count() as usize);
    body.extend_from_slice(&msg.step.to_le_bytes());
    body.extend_from_slice(&msg.part.to_le_bytes());
    body.extend_from_slice(&msg.lane_lo.to_le_bytes());
    body.extend_from_slice(&msg.lane_hi.to_le_bytes());
    for p in &msg.payloads {
        match p {
            ChannelPayload::U8(v) => body.extend_from_slice(v),
            ChannelPayload::F64(v) => {
                for &x in v {
                    body.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(&body)
}

/// Reads one frame; `rows` is the expected row count of each payload.
/// Returns `None` on a shutdown frame.
fn read_frame(
    r: &mut impl Read,
    kinds: &[ChannelKind],
    rows: usize,
) -> std::io::Result<Option<SyncMessage>> {
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let len = u32::from_le_bytes(len4) as usize;
    if len == 0 {
        return Ok(None);
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "malformed frame");
    if body.len() < 14 {
        return Err(bad());
    }
    let step = u32::from_le_bytes(body[0..4].try_into().unwrap());
    let part = u16::from_le_bytes(body[4..6].try_into().unwrap());
    let lane_lo = u32::from_le_bytes(body[6..10].try_into().unwrap());
    let lane_hi = u32::from_le_bytes(body[10..14].try_into().unwrap());
    if lane_hi <= lane_lo {
        return Err(bad());
    }
    let lanes = (lane_hi - lane_lo) as usize;
    let cells = rows * lanes;
    let mut offset = 14usize;
    let mut payloads = Vec::with_capacity(kinds.len());
    for kind in kinds {
        match kind {
            ChannelKind::U8 => {
                let end = offset + cells;
                if end > body.len() {
                    return Err(bad());
                }
                payloads.push(ChannelPayload::U8(body[offset..end].to_vec()));
                offset = end;
            }
            ChannelKind::F64 => {
                let end = offset + cells * 8;
                if end > body.len() {
                    return Err(bad());
                }
                let vals = body[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                payloads.push(ChannelPayload::F64(vals));
                offset = end;
            }
        }
    }
    if offset != body.len() {
        return Err(bad());
    }
    Ok(Some(SyncMessage {
        step,
        part,
        lane_lo,
        lane_hi,
        payloads,
    }))
}

/// Socket worker loop: receive a broadcast snapshot, answer with the owned
/// update, repeat until the shutdown frame.
fn socket_worker_loop(ctx: WorkerCtx, mut stream: TcpStream) {
    let kinds: Vec<ChannelKind> = ctx.spec.channels().iter().map(|c| c.kind).collect();
    let n = ctx.num_nodes as usize;
    loop {
        let Ok(Some(broadcast)) = read_frame(&mut stream, &kinds, n) else {
            return;
        };
        let lanes = broadcast.lanes();
        let snapshot = payloads_into_channel_set(broadcast.payloads, n, lanes);
        let reply = ctx.step(&snapshot, broadcast.step, broadcast.lane_lo, broadcast.lane_hi);
        if write_frame(&mut stream, &reply).is_err() {
            return;
        }
    }
}

fn in_process_worker_loop(ctx: WorkerCtx, jobs: mpsc::Receiver<Job>, replies: mpsc::Sender<SyncMessage>) {
    while let Ok(job) = jobs.recv() {
        match job {
            Job::Step {
                snapshot,
                step,
                lane_lo,
                lane_hi,
            } => {
                let msg = ctx.step(&snapshot, step, lane_lo, lane_hi);
                if replies.send(msg).is_err() {
                    return;
                }
            }
            Job::Finish => return,
        }
    }
}

fn validate_parts(spec: &ModelSpec, parts: &[Partition], num_nodes: u64) -> Result<()> {
    let weighted = parts.iter().any(|p| p.weights.is_some());
    if weighted && !spec.supports_weights() {
        return Err(Error::Validation(format!(
            "model {} does not support weighted graphs",
            spec.model_id()
        )));
    }
    if let ModelKind::MajorityRule { q } = *spec.kind() {
        if q > num_nodes {
            return Err(Error::Validation(format!(
                "majority rule group size q={q} exceeds node count {num_nodes}"
            )));
        }
    }
    let mut covered = vec![false; num_nodes as usize];
    for p in parts {
        for &t in &p.owned_targets {
            if covered[t as usize] {
                return Err(Error::Protocol(format!(
                    "partitions overlap on target {t}"
                )));
            }
            covered[t as usize] = true;
        }
    }
    if let Some(missing) = covered.iter().position(|&c| !c) {
        return Err(Error::Protocol(format!(
            "partitions do not cover target {missing}"
        )));
    }
    Ok(())
}

/// Run batched Monte Carlo epochs across `workers` workers, one per saved
/// partition under `root`. Output is bit-identical to the single-process
/// [`crate::engine::run_epochs`] with the same arguments.
#[allow(clippy::too_many_arguments)]
pub fn run_distributed_epochs(
    root: impl AsRef<Path>,
    workers: u32,
    spec: &ModelSpec,
    seeds: &SeedSet,
    epochs: u64,
    times: StepBudget,
    batch_size: usize,
    master_seed: u64,
    opts: &DistributedOptions,
) -> Result<DistributedRun> {
    let root = root.as_ref();
    let manifest = load_manifest(root)?;
    if workers != manifest.num_parts {
        return Err(Error::Config(format!(
            "{workers} workers requested but the partition root holds {} shards",
            manifest.num_parts
        )));
    }
    if epochs < 1 || batch_size < 1 {
        return Err(Error::Validation("epochs and batch_size must be >= 1".into()));
    }
    if matches!(times, StepBudget::Converge) && !spec.supports_convergence() {
        return Err(Error::Validation(format!(
            "model {} has no guaranteed fixed point; use a fixed step count",
            spec.model_id()
        )));
    }
    let mut parts = Vec::with_capacity(workers as usize);
    for q in 1..=workers {
        parts.push(load_partition(root, q)?.0);
    }
    let num_nodes = manifest.global_num_nodes;
    validate_parts(spec, &parts, num_nodes)?;
    if let Some(&bad) = seeds.ids().iter().find(|&&s| s >= num_nodes) {
        return Err(Error::Validation(format!(
            "seed id {bad} out of range for {num_nodes} nodes"
        )));
    }

    let owned_by_part: Vec<Vec<u64>> = parts.iter().map(|p| p.owned_targets.clone()).collect();
    let contexts: Vec<WorkerCtx> = parts
        .into_iter()
        .map(|p| WorkerCtx::new(spec, p, master_seed))
        .collect();

    match opts.transport {
        Transport::InProcess => std::thread::scope(|scope| {
            let mut links: Vec<InProcessLink> = Vec::new();
            for ctx in contexts {
                let (job_tx, job_rx) = mpsc::channel();
                let (reply_tx, reply_rx) = mpsc::channel();
                scope.spawn(move || in_process_worker_loop(ctx, job_rx, reply_tx));
                links.push(InProcessLink {
                    jobs: job_tx,
                    replies: reply_rx,
                });
            }
            let out = coordinate(
                spec,
                seeds,
                epochs,
                times,
                batch_size,
                master_seed,
                num_nodes as usize,
                &owned_by_part,
                &mut links,
                &opts.engine,
            );
            for link in &mut links {
                link.finish();
            }
            out
        }),
        Transport::LocalSocket => {
            let listener =
                TcpListener::bind("127.0.0.1:0").map_err(|e| Error::io("127.0.0.1:0", e))?;
            let addr = listener
                .local_addr()
                .map_err(|e| Error::io("127.0.0.1:0", e))?;
            std::thread::scope(|scope| {
                let kinds: Vec<ChannelKind> = spec.channels().iter().map(|c| c.kind).collect();
                let mut links: Vec<SocketLink> = Vec::new();
                for ctx in contexts {
                    let owned_rows = ctx.part.num_rows();
                    let stream = TcpStream::connect(addr).map_err(|e| Error::io("loopback", e))?;
                    let (server_side, _) = listener.accept().map_err(|e| Error::io("accept", e))?;
                    scope.spawn(move || socket_worker_loop(ctx, stream));
                    links.push(SocketLink {
                        stream: server_side,
                        channel_kinds: kinds.clone(),
                        owned_rows,
                    });
                }
                let out = coordinate(
                    spec,
                    seeds,
                    epochs,
                    times,
                    batch_size,
                    master_seed,
                    num_nodes as usize,
                    &owned_by_part,
                    &mut links,
                    &opts.engine,
                );
                for link in &mut links {
                    link.finish();
                }
                out
            })
        }
    }
}

/// The bulk-synchronous pass/step loop, shared by both transports.
#[allow(clippy::too_many_arguments)]
fn coordinate<L: WorkerLink>(
    spec: &ModelSpec,
    seeds: &SeedSet,
    epochs: u64,
    times: StepBudget,
    batch_size: usize,
    master_seed: u64,
    num_nodes: usize,
    owned_by_part: &[Vec<u64>],
    links: &mut [L],
    engine_opts: &EngineOptions,
) -> Result<DistributedRun> {
    let descs = spec.channels();
    let step_cap = engine_opts
        .convergence_step_cap
        .unwrap_or(10 * num_nodes as u64);
    let mut acc = EpochAccumulator::new(spec, engine_opts.record_final_states);
    let mut traffic = TrafficReport::default();
    let mut done = 0u64;
    while done < epochs {
        let lanes = batch_size.min((epochs - done) as usize);
        let lane_lo = u32::try_from(done).map_err(|_| {
            Error::Validation(format!("epoch index {done} exceeds u32 simulation index"))
        })?;
        let lane_hi = lane_lo + lanes as u32;

        // Initial global snapshot; identical to the engine's init_states.
        let mut snapshot = ChannelSet::zeroed(descs, num_nodes, lanes);
        {
            let mut views: Vec<ChannelSliceMut> =
                snapshot.bufs.iter_mut().map(|b| b.as_mut()).collect();
            models::init_state(
                spec,
                num_nodes,
                seeds.ids(),
                lanes,
                lane_lo,
                master_seed,
                &mut views,
            )?;
        }
        acc.add_step_counts(0, &snapshot.label_counts(spec));
        let mut prev_for_converge: Option<ChannelSet> = None;
        let mut shared = Arc::new(snapshot);
        let mut steps_run = 0u64;
        loop {
            let more = match times {
                StepBudget::Fixed(t) => steps_run < t,
                StepBudget::Converge => {
                    steps_run < step_cap
                        && !distributed_converged(spec, &shared, prev_for_converge.as_ref())
                }
            };
            if !more {
                break;
            }
            let k = u32::try_from(steps_run + 1).expect("step exceeds u32");
            for link in links.iter_mut() {
                link.dispatch(&shared, k, lane_lo, lane_hi)?;
            }
            let mut messages = Vec::with_capacity(links.len());
            for link in links.iter_mut() {
                messages.push(link.collect()?);
            }
            traffic.per_step.push((
                lanes as u32,
                messages.iter().map(|m| m.value_count()).sum(),
            ));
            let merged = merge_states(&messages, owned_by_part, num_nodes)?;
            let next = payloads_into_channel_set(merged, num_nodes, lanes);
            steps_run += 1;
            acc.add_step_counts(steps_run, &next.label_counts(spec));
            prev_for_converge = Some(Arc::try_unwrap(shared).unwrap_or_else(|a| (*a).clone()));
            shared = Arc::new(next);
        }
        let finals = shared.label_counts(spec);
        acc.finish_pass(spec, &shared, steps_run, finals);
        done += lanes as u64;
    }
    Ok(DistributedRun {
        results: acc.finish(spec, master_seed),
        traffic,
    })
}

fn distributed_converged(
    spec: &ModelSpec,
    cur: &ChannelSet,
    prev: Option<&ChannelSet>,
) -> bool {
    match spec.kind() {
        ModelKind::IndependentCascades { .. } => {
            !cur.bufs[0].u8().contains(&models::IC_NEWLY_ACTIVE)
        }
        ModelKind::Threshold { .. } => match prev {
            Some(p) => cur == p,
            None => false,
        },
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_epochs;
    use crate::graph::CsrGraph;
    use crate::partition::{generate_partition, save_partitions};

    fn ring_graph(n: u64) -> CsrGraph {
        let edges: Vec<(u64, u64)> = (0..n)
            .flat_map(|v| [(v, (v + 1) % n), ((v + 3) % n, v)])
            .collect();
        CsrGraph::from_edges(n as usize, &edges, None, true).unwrap()
    }

    fn saved_root(g: &CsrGraph, d: u32) -> tempfile::TempDir {
        let parts = generate_partition(g, d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_partitions(&parts, dir.path()).unwrap();
        dir
    }

    fn msg(part: u16, lanes: u32, values: Vec<u8>) -> SyncMessage {
        SyncMessage {
            step: 1,
            part,
            lane_lo: 0,
            lane_hi: lanes,
            payloads: vec![ChannelPayload::U8(values)],
        }
    }

    #[test]
    fn merge_places_disjoint_blocks() {
        let owned = vec![vec![0u64, 1], vec![2]];
        let a = msg(1, 2, vec![10, 11, 20, 21]);
        let b = msg(2, 2, vec![30, 31]);
        let merged = merge_states(&[a.clone(), b.clone()], &owned, 3).unwrap();
        let ChannelPayload::U8(vals) = &merged[0] else {
            panic!("wrong kind")
        };
        assert_eq!(vals, &vec![10, 11, 20, 21, 30, 31]);
        // Arrival order is irrelevant.
        let merged2 = merge_states(&[b, a], &owned, 3).unwrap();
        assert_eq!(merged, merged2);
    }

    #[test]
    fn merge_rejects_overlap_and_gaps() {
        let overlapping = vec![vec![0u64, 1], vec![1, 2]];
        let a = msg(1, 1, vec![1, 2]);
        let b = msg(2, 1, vec![3, 4]);
        assert!(matches!(
            merge_states(&[a.clone(), b.clone()], &overlapping, 3),
            Err(Error::Protocol(_))
        ));
        let gappy = vec![vec![0u64], vec![2]];
        let a = msg(1, 1, vec![1]);
        let b = msg(2, 1, vec![3]);
        assert!(matches!(
            merge_states(&[a, b], &gappy, 3),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn frame_round_trip() {
        let m = SyncMessage {
            step: 7,
            part: 3,
            lane_lo: 4,
            lane_hi: 6,
            payloads: vec![
                ChannelPayload::U8(vec![1, 2, 3, 4]),
                ChannelPayload::F64(vec![0.5, -1.25, 3.0, 0.0]),
            ],
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &m).unwrap();
        let kinds = [ChannelKind::U8, ChannelKind::F64];
        let back = read_frame(&mut buf.as_slice(), &kinds, 2).unwrap().unwrap();
        assert_eq!(m, back);
        // Shutdown frame decodes to None.
        let mut empty = Vec::new();
        empty.extend_from_slice(&0u32.to_le_bytes());
        assert!(read_frame(&mut empty.as_slice(), &kinds, 2).unwrap().is_none());
    }

    #[test]
    fn single_worker_matches_engine() {
        let g = ring_graph(24);
        let root = saved_root(&g, 1);
        let spec = ModelSpec::new(ModelKind::Sir {
            beta: 0.3,
            lambda: 0.15,
        })
        .unwrap();
        let seeds = SeedSet::new(vec![0, 5], 24).unwrap();
        let mut opts = EngineOptions::default();
        opts.record_final_states = true;
        let single = run_epochs(&spec, &g, &seeds, 9, StepBudget::Fixed(10), 4, 77, &opts).unwrap();
        let dopts = DistributedOptions {
            engine: opts,
            transport: Transport::InProcess,
        };
        let dist = run_distributed_epochs(
            root.path(),
            1,
            &spec,
            &seeds,
            9,
            StepBudget::Fixed(10),
            4,
            77,
            &dopts,
        )
        .unwrap();
        assert_eq!(single, dist.results);
    }

    #[test]
    fn multi_worker_matches_engine_bitwise() {
        let g = ring_graph(40);
        let spec = ModelSpec::new(ModelKind::SeirDt {
            beta: 0.25,
            lambda: 0.1,
            alpha: 0.4,
        })
        .unwrap();
        let seeds = SeedSet::new(vec![1, 2, 3], 40).unwrap();
        let mut opts = EngineOptions::default();
        opts.record_final_states = true;
        let single =
            run_epochs(&spec, &g, &seeds, 6, StepBudget::Fixed(12), 3, 123, &opts).unwrap();
        for d in [2u32, 3] {
            let root = saved_root(&g, d);
            let dopts = DistributedOptions {
                engine: opts.clone(),
                transport: Transport::InProcess,
            };
            let dist = run_distributed_epochs(
                root.path(),
                d,
                &spec,
                &seeds,
                6,
                StepBudget::Fixed(12),
                3,
                123,
                &dopts,
            )
            .unwrap();
            assert_eq!(single, dist.results, "d = {d}");
        }
    }

    #[test]
    fn socket_transport_matches_in_process() {
        let g = ring_graph(20);
        let root = saved_root(&g, 2);
        let spec = ModelSpec::new(ModelKind::Voter).unwrap();
        let seeds = SeedSet::new(vec![0, 1, 2], 20).unwrap();
        let mut opts = EngineOptions::default();
        opts.record_final_states = true;
        let run = |transport| {
            let dopts = DistributedOptions {
                engine: opts.clone(),
                transport,
            };
            run_distributed_epochs(
                root.path(),
                2,
                &spec,
                &seeds,
                5,
                StepBudget::Fixed(20),
                2,
                31,
                &dopts,
            )
            .unwrap()
        };
        let a = run(Transport::InProcess);
        let b = run(Transport::LocalSocket);
        assert_eq!(a.results, b.results);
        assert_eq!(a.traffic, b.traffic);
    }

    #[test]
    fn traffic_is_lanes_times_nodes_times_channels() {
        let g = ring_graph(30);
        let root = saved_root(&g, 3);
        let spec = ModelSpec::new(ModelKind::Sir {
            beta: 0.2,
            lambda: 0.1,
        })
        .unwrap();
        let seeds = SeedSet::new(vec![0], 30).unwrap();
        let dist = run_distributed_epochs(
            root.path(),
            3,
            &spec,
            &seeds,
            4,
            StepBudget::Fixed(5),
            4,
            9,
            &DistributedOptions::default(),
        )
        .unwrap();
        assert_eq!(dist.traffic.per_step.len(), 5);
        for &(lanes, values) in &dist.traffic.per_step {
            assert_eq!(values, lanes as u64 * 30 * 2);
        }
    }

    #[test]
    fn worker_count_mismatch_is_config_error() {
        let g = ring_graph(10);
        let root = saved_root(&g, 2);
        let spec = ModelSpec::new(ModelKind::Voter).unwrap();
        let seeds = SeedSet::new(vec![0], 10).unwrap();
        assert!(matches!(
            run_distributed_epochs(
                root.path(),
                3,
                &spec,
                &seeds,
                1,
                StepBudget::Fixed(1),
                1,
                1,
                &DistributedOptions::default(),
            ),
            Err(Error::Config(_))
        ));
    }
}
