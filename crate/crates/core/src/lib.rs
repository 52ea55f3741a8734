//! Multi-task attention-based multiple-instance learning over bags of tile
//! features: data store, synthetic cohorts, stratified splitting, the MIL
//! network with analytic gradients, cross-validated training, evaluation
//! statistics and attention/embedding analyses.

pub mod analysis;
pub mod config;
pub mod error;
pub mod feature_store;
pub mod mil_net;
pub mod plot;
pub mod rng;
pub mod splitter;
pub mod stats;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
