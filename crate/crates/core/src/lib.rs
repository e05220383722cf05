//! Hierarchical risk-partitioned traffic accident forecasting on a
//! spatio-temporal grid.

pub mod calendar;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod grid;
pub mod io;
pub mod kriging;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod sample;
pub mod spectral;
pub mod subregion;
pub mod synth;
pub mod transfer;

pub use error::{HintError, Result};
