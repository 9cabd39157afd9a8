//! Cascading-failure simulation on DC power-flow grids, a GRU-gated graph
//! attention network trained on cascade samples from several grids, and
//! the per-line cascade-exposure ranking extracted from its attention.

pub mod autodiff;
pub mod baselines;
pub mod cascade;
pub mod error;
pub mod exposure;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod powerflow;
pub mod seeds;

pub use error::{Error, Result};
