//! Graph-propagation simulation engine.
//!
//! Runs mechanism-based propagation models (epidemic spreading, influence
//! cascades, opinion dynamics) on in-CSR graphs with two accelerations:
//! synchronous message-passing node updates and batched Monte Carlo lanes.
//! A target-node partitioner and a bulk-synchronous multi-worker runner
//! scale runs across workers while staying bit-identical to the
//! single-process engine, thanks to stateless keyed randomness.

pub mod cli;
pub mod distributed;
pub mod engine;
pub mod error;
pub mod graph;
pub mod models;
pub mod oracle;
pub mod partition;
pub mod rng;

pub use engine::{
    init_states, run_epochs, step, EngineOptions, EpochResults, FinalStates, Simulation,
    StateBatch, StepBudget, Trajectory,
};
pub use error::{Error, Result};
pub use graph::{
    degree_centrality_seeds, load_edge_list, load_edge_list_remapped, CsrGraph, SeedSet,
};
pub use models::{ModelKind, ModelSpec};
pub use partition::{generate_partition, load_partition, save_partitions, Partition};
