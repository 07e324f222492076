//! Real-time crash-likelihood modelling for signalized intersections.
//!
//! The crate covers the whole chain: a seeded generator of 15-minute
//! connected-vehicle aggregates, zone-specific data preparation, a
//! time-embedded transformer classifier with four recurrent/convolutional
//! baselines, training, evaluation, and Shapley attribution.

pub mod datamodel;
pub mod error;
pub mod eval;
pub mod models;
pub mod numcore;
pub mod pipeline;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
