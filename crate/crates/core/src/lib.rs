//! Time-changed normalizing flows for univariate stochastic processes.

pub mod base_process;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod sde;
pub mod stats;
pub mod svg;
pub mod time_change;
pub mod trainer;

pub use error::{Error, Result};
