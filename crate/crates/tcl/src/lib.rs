//! Temporal contrastive learning on continuous-time interaction graphs.
//!
//! The library covers the full pipeline for temporal interaction
//! prediction:
//!
//! - [`ingest`]: timestamped event logs, chronological splits, dataset
//!   statistics.
//! - [`tdig`]: the temporal dependency interaction graph, k-depth
//!   sub-graph extraction, BFS serialization, and structure attention
//!   masks.
//! - [`autodiff`]: a minimal reverse-mode differentiation engine with a
//!   finite-difference gradient checker.
//! - [`encoder`]: structure-masked graph transformer blocks fused by a
//!   cross-attentional two-stream encoder.
//! - [`objective`]: future-prediction head, discriminator, contrastive
//!   loss, negative sampling, Adam, and the training loop.
//! - [`eval`]: Mean Rank / Hit@10 evaluation over a replayed test stream
//!   with exact per-node embedding caches.
//! - [`checkpoint`]: named-tensor manifests for saving and loading
//!   trained models.
//! - [`synth`]: synthetic interaction generators for experiments and
//!   examples.
//!
//! See the `examples/` directory for one runnable program per capability,
//! or the `tcl` binary for a train/eval/stats command line.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod encoder;
pub mod ingest;
pub mod objective;
pub mod synth;
pub mod tdig;

pub use error::{Result, TclError};
