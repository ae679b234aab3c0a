//! Link-disguise defense for GNN prediction vectors.
//!
//! A "core" subset of nodes is chosen so that every strongly similar edge
//! touches it. Each core node then receives a bounded noise vector that pulls
//! its similarity to direct neighbours down toward the similarity it has with
//! nodes exactly `n` hops away. The crate also contains the similarity-based
//! link-stealing attacks used to score the defense, the utility metrics that
//! measure its cost, and a tiny GCN that produces realistic posteriors for
//! synthetic graphs.

pub mod attacks;
pub mod coresel;
pub mod error;
pub mod evalkit;
pub mod graphio;
pub mod noisecraft;
pub mod rng;
pub mod simkit;
pub mod toygnn;

pub use error::{GridError, Result};
pub use graphio::{Graph, NodeData};
pub use simkit::{MetricKind, PredictionMatrix};
