//! Semantic flow graphs for self-consistent agent inferences.
//!
//! The crate turns the R sampled trajectories of an agent task into a single
//! weighted directed graph, predicts eventual failure of the task from that
//! graph (complete or truncated) with a small graph convolutional network, and
//! replays early-termination and model-hotswap policies over recorded logs to
//! report what they would have cost and which outcomes they would have changed.
//!
//! Module map:
//!
//! - [`trajectory`]: log schema, validation, majority voting and labels.
//! - [`embedding`]: tool multi-hot block plus hashed subword argument vectors.
//! - [`sfg`]: truncation, exact and clustered graph construction, adjacency.
//! - [`gcn`]: three-layer GCN classifier with manual backprop, Adam, k-fold CV.
//! - [`metrics`]: accuracy, AUROC, AUPR, FPR@95 and the two baselines.
//! - [`hotswap`]: pricing, early termination and hotswap replay simulation.
//! - [`synth`]: seeded synthetic log generator with a plantable failure signal.

pub mod embedding;
pub mod error;
pub mod gcn;
pub mod hotswap;
pub mod linalg;
pub mod metrics;
pub mod sfg;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
