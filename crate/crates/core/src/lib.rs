//! Consistency/discrepancy contrastive learning for tripartite-graph
//! recommendation (groups or bundles).

pub mod error;
pub mod graph;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
