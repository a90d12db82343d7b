//! Subgraph-wise mini-batch training of graph convolutional networks with
//! local message compensation, alongside exact and baseline gradient
//! estimators.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`]: CSR graph, GCN normalization, halos, SBM generator
//! - [`partition`]: balanced BFS partitions and weighted cluster batches
//! - [`model`]: GCN forward pass and softmax cross-entropy head
//! - [`backward`]: exact backward message passing, backward SGD, finite differences
//! - [`lmc`]: historical stores and the compensated estimators
//! - [`experiment`]: training and gradient-error runs producing metric rows

pub mod backward;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod lmc;
pub mod model;
pub mod partition;

pub use error::{LmcError, Result};
