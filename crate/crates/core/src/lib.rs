//! Instrumented decoder-only transformer lab for studying attention sinks
//! and repeated-token divergence.

pub mod cli;
pub mod clusterlab;
pub mod convergence;
mod error;
pub mod interventions;
pub mod model;
pub mod numkit;
pub mod par;
pub mod report;
pub mod sinklab;

pub use error::{Error, Result};
pub use numkit::Scalar;

pub type Matrix64 = numkit::Matrix<f64>;
pub type Matrix32 = numkit::Matrix<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type WeightSet64 = model::WeightSet<f64>;
pub type Trace64 = model::Trace<f64>;
