//! Command-line front end: run simulations, partition graphs, drive
//! distributed runs and inspect graphs. Results are emitted as JSON
//! documents (see `results.schema.json`) that embed the fully resolved
//! configuration, so any result can be rerun from its own output.
//!
//! Exit codes: 0 success, 1 runtime error, 2 config/input error,
//! 3 verification failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::distributed::{run_distributed_epochs, DistributedOptions, Transport};
use crate::engine::{run_epochs, EngineOptions, EpochResults, StepBudget};
use crate::error::{Error, Result};
use crate::graph::{self, CsrGraph, SeedSet};
use crate::models::ModelSpec;
use crate::partition::{generate_partition, save_partitions, Partition};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "propsim",
    about = "Batched Monte Carlo simulation of graph propagation models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run batched Monte Carlo simulations and write a results document.
    Run(RunArgs),
    /// Partition a graph by target node and save the shards.
    Partition(PartitionArgs),
    /// Run simulations across one worker per saved partition.
    RunDistributed(RunDistributedArgs),
    /// Print summary statistics of a graph.
    Info(InfoArgs),
}

#[derive(Args, Debug, Default)]
struct GraphArgs {
    /// Path to a text edge list (`u v` or `u v w` per line).
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Treat the edge list as directed (no symmetrization).
    #[arg(long)]
    directed: bool,
    /// Edge list lines carry a third weight token.
    #[arg(long)]
    weighted: bool,
    /// Compact sparse external ids into dense internal ids.
    #[arg(long)]
    remap_ids: bool,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Model id: si, sis, sir, seir_dt, ic, threshold, voter,
    /// majority_rule, hk.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated named parameters, e.g. beta=0.01,lambda=0.005.
    #[arg(long)]
    params: Option<String>,
    /// Seed spec: `top-degree:<fraction>` or `file:<path>`.
    #[arg(long)]
    seeds: Option<String>,
    /// Number of Monte Carlo epochs.
    #[arg(long)]
    epochs: Option<u64>,
    /// Steps per epoch, or `converge` for models with fixed points.
    #[arg(long)]
    steps: Option<String>,
    /// Monte Carlo lanes executed together.
    #[arg(long, value_name = "B")]
    batch: Option<usize>,
    /// Master seed; all randomness is keyed from it.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Worker threads for the step executor.
    #[arg(long)]
    threads: Option<usize>,
    /// State memory cap in bytes (default: 75% of physical memory).
    #[arg(long)]
    memory_cap: Option<u64>,
    /// Record per-lane final states in the results document.
    #[arg(long)]
    final_states: bool,
    /// Write the results document here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Load the full run configuration from a JSON file instead of flags.
    #[arg(long, conflicts_with_all = ["graph", "model", "params", "seeds", "epochs", "steps", "batch", "seed"])]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Number of shards.
    #[arg(long)]
    parts: u32,
    /// Directory for `manifest.json` and the shard files.
    #[arg(long)]
    root: PathBuf,
}

#[derive(Args, Debug)]
struct RunDistributedArgs {
    /// Partition directory produced by `propsim partition`.
    #[arg(long)]
    root: PathBuf,
    /// Worker count; must equal the manifest's shard count.
    #[arg(long)]
    workers: u32,
    #[command(flatten)]
    model: ModelArgs,
    /// Worker transport.
    #[arg(long, value_parser = ["in-process", "socket"], default_value = "in-process")]
    transport: String,
    /// Re-run single-process with the same arguments and require equality.
    #[arg(long, requires = "graph")]
    verify_against_single: bool,
    #[command(flatten)]
    graph: GraphArgs,
    /// Load the full run configuration from a JSON file instead of flags.
    #[arg(long, conflicts_with_all = ["model", "params", "seeds", "epochs", "steps", "batch", "seed"])]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[command(flatten)]
    graph: GraphArgs,
}

/// Steps field: a count or the word `converge`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepsSpec {
    Count(u64),
    Word(String),
}

impl StepsSpec {
    fn to_budget(&self, spec: &ModelSpec) -> Result<StepBudget> {
        match self {
            StepsSpec::Count(n) => Ok(StepBudget::Fixed(*n)),
            StepsSpec::Word(w) if w == "converge" => {
                if spec.supports_convergence() {
                    Ok(StepBudget::Converge)
                } else {
                    Err(Error::Config(format!(
                        "steps=converge is only valid for ic and threshold, not {}",
                        spec.model_id()
                    )))
                }
            }
            StepsSpec::Word(w) => Err(Error::Config(format!(
                "steps must be a number or \"converge\", got {w:?}"
            ))),
        }
    }
}

fn default_batch() -> usize {
    1
}

/// Fully resolved run configuration; also the schema of `--config` files.
/// Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub directed: bool,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub remap_ids: bool,
    pub model: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<String>,
    pub epochs: u64,
    pub steps: StepsSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_cap_bytes: Option<u64>,
    #[serde(default)]
    pub final_states: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            threads: self.threads,
            memory_cap_bytes: self.memory_cap_bytes,
            record_final_states: self.final_states,
            convergence_step_cap: None,
        }
    }
}

fn parse_params(s: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for piece in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = piece.split_once('=').ok_or_else(|| {
            Error::Config(format!("parameter {piece:?} is not of the form name=value"))
        })?;
        let v: f64 = value.trim().parse().map_err(|_| {
            Error::Config(format!("parameter {key} has non-numeric value {value:?}"))
        })?;
        if out.insert(key.trim().to_string(), v).is_some() {
            return Err(Error::Config(format!("parameter {key} given twice")));
        }
    }
    Ok(out)
}

fn parse_steps(s: &str) -> StepsSpec {
    match s.parse::<u64>() {
        Ok(n) => StepsSpec::Count(n),
        Err(_) => StepsSpec::Word(s.to_string()),
    }
}

fn config_from_flags(graph: &GraphArgs, model: &ModelArgs) -> Result<RunConfig> {
    let model_name = model
        .model
        .clone()
        .ok_or_else(|| Error::Config("--model is required (or use --config)".into()))?;
    let params = match &model.params {
        Some(s) => parse_params(s)?,
        None => BTreeMap::new(),
    };
    Ok(RunConfig {
        graph: graph.graph.clone(),
        directed: graph.directed,
        weighted: graph.weighted,
        remap_ids: graph.remap_ids,
        model: model_name,
        params,
        seeds: model.seeds.clone(),
        epochs: model
            .epochs
            .ok_or_else(|| Error::Config("--epochs is required".into()))?,
        steps: parse_steps(
            model
                .steps
                .as_deref()
                .ok_or_else(|| Error::Config("--steps is required".into()))?,
        ),
        batch_size: model.batch.unwrap_or(1),
        master_seed: model.seed.unwrap_or(0),
        threads: model.threads,
        memory_cap_bytes: model.memory_cap,
        final_states: model.final_states,
        output: model.out.clone(),
    })
}

fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_graph_at(
    path: Option<&Path>,
    directed: bool,
    weighted: bool,
    remap_ids: bool,
) -> Result<CsrGraph> {
    let path = path.ok_or_else(|| Error::Config("a graph path is required".into()))?;
    if remap_ids {
        Ok(graph::load_edge_list_remapped(path, directed, weighted)?.0)
    } else {
        graph::load_edge_list(path, directed, weighted)
    }
}

fn load_graph(cfg: &RunConfig) -> Result<CsrGraph> {
    load_graph_at(cfg.graph.as_deref(), cfg.directed, cfg.weighted, cfg.remap_ids)
}

/// Resolve a seed spec against an in-degree source.
fn resolve_seeds(
    spec: &ModelSpec,
    seed_spec: Option<&str>,
    num_nodes: usize,
    in_degrees: impl FnOnce() -> Vec<u64>,
) -> Result<SeedSet> {
    let Some(s) = seed_spec else {
        if spec.requires_seeds() {
            return Err(Error::Config(format!(
                "model {} requires --seeds",
                spec.model_id()
            )));
        }
        return Ok(SeedSet::empty());
    };
    if let Some(frac) = s.strip_prefix("top-degree:") {
        let fraction: f64 = frac
            .parse()
            .map_err(|_| Error::Config(format!("bad top-degree fraction {frac:?}")))?;
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "seed fraction must be in (0, 1], got {fraction}"
            )));
        }
        let degs = in_degrees();
        let k = (fraction * num_nodes as f64).floor() as usize;
        if k == 0 {
            return Err(Error::Validation(format!(
                "seed fraction {fraction} of {num_nodes} nodes selects no seeds"
            )));
        }
        let mut order: Vec<usize> = (0..num_nodes).collect();
        order.sort_by(|&a, &b| degs[b].cmp(&degs[a]).then_with(|| a.cmp(&b)));
        SeedSet::new(order[..k].iter().map(|&v| v as u64).collect(), num_nodes)
    } else if let Some(path) = s.strip_prefix("file:") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            ids.push(t.parse::<u64>().map_err(|_| Error::Parse {
                path: PathBuf::from(path),
                line: i + 1,
                msg: format!("expected a node id, got {t:?}"),
            })?);
        }
        SeedSet::new(ids, num_nodes)
    } else {
        Err(Error::Config(format!(
            "seed spec {s:?} must be top-degree:<fraction> or file:<path>"
        )))
    }
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Serialize)]
struct ResultsDocument<'a> {
    schema_version: u32,
    command: &'a str,
    /// Wall-clock timestamp; excluded from reproducibility comparisons.
    generated_unix_ms: u64,
    config: &'a RunConfig,
    results: &'a EpochResults,
    #[serde(skip_serializing_if = "Option::is_none")]
    traffic: Option<TrafficSummary>,
}

#[derive(Debug, Serialize)]
struct TrafficSummary {
    steps: u64,
    total_values: u64,
    min_step_values: u64,
    max_step_values: u64,
}

fn emit_document(doc: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::Contract(format!("result serialization: {e}")))?;
    match out {
        Some(path) => std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e)),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => load_config_file(path)?,
        None => config_from_flags(&args.graph, &args.model)?,
    };
    let spec = ModelSpec::from_name_params(&cfg.model, &cfg.params)?;
    let budget = cfg.steps.to_budget(&spec)?;
    let g = load_graph(&cfg)?;
    let seeds = resolve_seeds(&spec, cfg.seeds.as_deref(), g.num_nodes(), || {
        g.in_degrees()
    })?;
    let results = run_epochs(
        &spec,
        &g,
        &seeds,
        cfg.epochs,
        budget,
        cfg.batch_size,
        cfg.master_seed,
        &cfg.engine_options(),
    )?;
    let doc = ResultsDocument {
        schema_version: SCHEMA_VERSION,
        command: "run",
        generated_unix_ms: unix_ms(),
        config: &cfg,
        results: &results,
        traffic: None,
    };
    emit_document(&doc, cfg.output.as_deref())
}

#[derive(Debug, Serialize)]
struct PartitionDocument {
    schema_version: u32,
    command: &'static str,
    generated_unix_ms: u64,
    root: PathBuf,
    num_parts: u32,
    global_num_nodes: u64,
    total_edges: u64,
    graph_hash: String,
    shard_edge_loads: Vec<u64>,
    ideal_load: f64,
    max_load_deviation: f64,
    max_in_degree: u64,
    balance_bound_holds: bool,
}

fn cmd_partition(args: &PartitionArgs) -> Result<()> {
    let g = load_graph_at(
        args.graph.graph.as_deref(),
        args.graph.directed,
        args.graph.weighted,
        args.graph.remap_ids,
    )?;
    let parts = generate_partition(&g, args.parts)?;
    let manifest = save_partitions(&parts, &args.root)?;
    let m = g.num_edges() as f64;
    let ideal = m / args.parts as f64;
    let loads: Vec<u64> = parts.iter().map(Partition::edge_load).collect();
    let max_dev = loads
        .iter()
        .map(|&l| (l as f64 - ideal).abs())
        .fold(0.0f64, f64::max);
    let w_max = g.max_in_degree();
    let doc = PartitionDocument {
        schema_version: SCHEMA_VERSION,
        command: "partition",
        generated_unix_ms: unix_ms(),
        root: args.root.clone(),
        num_parts: manifest.num_parts,
        global_num_nodes: manifest.global_num_nodes,
        total_edges: g.num_edges() as u64,
        graph_hash: manifest.graph_hash,
        shard_edge_loads: loads,
        ideal_load: ideal,
        max_load_deviation: max_dev,
        max_in_degree: w_max,
        balance_bound_holds: max_dev < w_max as f64,
    };
    emit_document(&doc, None)
}

fn cmd_run_distributed(args: &RunDistributedArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => load_config_file(path)?,
        None => config_from_flags(&args.graph, &args.model)?,
    };
    let spec = ModelSpec::from_name_params(&cfg.model, &cfg.params)?;
    let budget = cfg.steps.to_budget(&spec)?;
    let manifest = crate::partition::load_manifest(&args.root)?;
    let num_nodes = manifest.global_num_nodes as usize;
    // Degree seeds are resolved from the shards' in-degree information so a
    // distributed run does not need the original edge list.
    let seeds = resolve_seeds(&spec, cfg.seeds.as_deref(), num_nodes, || {
        let mut degs = vec![0u64; num_nodes];
        for q in 1..=manifest.num_parts {
            if let Ok((part, owned)) = crate::partition::load_partition(&args.root, q) {
                for (row, &t) in owned.iter().enumerate() {
                    degs[t as usize] = part.row_ptr[row + 1] - part.row_ptr[row];
                }
            }
        }
        degs
    })?;
    let transport = match args.transport.as_str() {
        "socket" => Transport::LocalSocket,
        _ => Transport::InProcess,
    };
    let opts = DistributedOptions {
        engine: cfg.engine_options(),
        transport,
    };
    let run = run_distributed_epochs(
        &args.root,
        args.workers,
        &spec,
        &seeds,
        cfg.epochs,
        budget,
        cfg.batch_size,
        cfg.master_seed,
        &opts,
    )?;

    if args.verify_against_single {
        let g = load_graph(&cfg)?;
        let single = run_epochs(
            &spec,
            &g,
            &seeds,
            cfg.epochs,
            budget,
            cfg.batch_size,
            cfg.master_seed,
            &cfg.engine_options(),
        )?;
        if single != run.results {
            return Err(Error::Verification(
                "distributed results differ from the single-process run".into(),
            ));
        }
    }

    let traffic = TrafficSummary {
        steps: run.traffic.per_step.len() as u64,
        total_values: run.traffic.total_values(),
        min_step_values: run.traffic.per_step.iter().map(|&(_, v)| v).min().unwrap_or(0),
        max_step_values: run.traffic.per_step.iter().map(|&(_, v)| v).max().unwrap_or(0),
    };
    let doc = ResultsDocument {
        schema_version: SCHEMA_VERSION,
        command: "run-distributed",
        generated_unix_ms: unix_ms(),
        config: &cfg,
        results: &run.results,
        traffic: Some(traffic),
    };
    emit_document(&doc, cfg.output.as_deref())
}

#[derive(Debug, Serialize)]
struct InfoDocument {
    schema_version: u32,
    command: &'static str,
    generated_unix_ms: u64,
    num_nodes: u64,
    num_edges: u64,
    /// Undirected-incidence convention (2M / N), as dataset tables report.
    avg_degree: f64,
    avg_in_degree: f64,
    max_in_degree: u64,
    directed: bool,
    weighted: bool,
}

fn cmd_info(args: &InfoArgs) -> Result<()> {
    let g = load_graph_at(
        args.graph.graph.as_deref(),
        args.graph.directed,
        args.graph.weighted,
        args.graph.remap_ids,
    )?;
    let n = g.num_nodes() as f64;
    let m = g.num_edges() as f64;
    let doc = InfoDocument {
        schema_version: SCHEMA_VERSION,
        command: "info",
        generated_unix_ms: unix_ms(),
        num_nodes: g.num_nodes() as u64,
        num_edges: g.num_edges() as u64,
        avg_degree: 2.0 * m / n,
        avg_in_degree: m / n,
        max_in_degree: g.max_in_degree(),
        directed: g.directed(),
        weighted: g.is_weighted(),
    };
    emit_document(&doc, None)
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::Config(_)
        | Error::Resource(_)
        | Error::Integrity(_)
        | Error::Io { .. } => 2,
        Error::Verification(_) => 3,
        Error::Contract(_) | Error::Protocol(_) => 1,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Parse { .. } => "parse",
        Error::Validation(_) => "validation",
        Error::Config(_) => "config",
        Error::Resource(_) => "resource",
        Error::Integrity(_) => "integrity",
        Error::Io { .. } => "io",
        Error::Verification(_) => "verification",
        Error::Contract(_) => "contract",
        Error::Protocol(_) => "protocol",
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Partition(args) => cmd_partition(args),
        Command::RunDistributed(args) => cmd_run_distributed(args),
        Command::Info(args) => cmd_info(args),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            let payload = serde_json::json!({
                "error": { "kind": error_kind(&err), "message": err.to_string() }
            });
            eprintln!("{payload}");
            exit_code_for(&err)
        }
    }
}
