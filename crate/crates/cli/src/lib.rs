//! Library surface of the experiment runner; the `osaka` binary is a thin
//! wrapper over these modules.

pub mod config;
pub mod report;
pub mod runner;
pub mod search;
pub mod svg;

pub use config::{ConfigError, ExperimentConfig};
