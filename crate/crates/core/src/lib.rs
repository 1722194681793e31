//! Hierarchical prototype learning over embedding sets.
//!
//! The pipeline builds a tree of prototypes with hierarchical K-means,
//! trains per-level projection heads with semantic path discrimination
//! alongside a fine-grained contrastive objective, and scores the learned
//! representations with weighted KNN and clustering metrics.

pub mod config;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod hkmeans;
pub mod model;
pub mod prototree;
pub mod rng;
pub mod spd;
pub mod synth;
pub mod trainer;

pub use config::TrainConfig;
pub use data_io::EmbeddingSet;
pub use error::{Error, Result};
pub use hkmeans::PrototypeTree;
pub use model::TrainState;
pub mod cli;
