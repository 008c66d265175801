//! Graph neural network engine and benchmark harness for online evaluation
//! with unseen-node insertion.
//!
//! The library trains two-layer GCN, GCN-64, GraphSAGE-mean, GAT, and MLP
//! models full-batch on citation-style node classification, using its own
//! reverse-mode autodiff over dense tensors and fixed sparse operators.
//! The benchmark protocol pretrains on the subgraph induced by the training
//! nodes, inserts the held-out nodes and edges, and measures test accuracy
//! before the first and after each of a bounded number of inference epochs,
//! comparing pretrained models against training from scratch in two
//! complementary settings (few labelled nodes vs. many).
//!
//! Entry points:
//! - [`tape::Tape`]: record a differentiable computation, then
//!   [`tape::Tape::backward`].
//! - [`models::forward`]: the five architectures over a tape.
//! - [`harness::run_single`] / [`harness::run_configs`]: the two-phase
//!   protocol and the experiment grid.
//! - [`analysis::emit_outputs`]: curve tables, SVG charts, divergence
//!   report.
//!
//! The `examples/` directory holds one runnable example per capability; the
//! `gnnbench` binary exposes `prepare`, `run`, `grid`, and `analyze`.

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod models;
pub mod plot;
pub mod seed;
pub mod sparse;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
