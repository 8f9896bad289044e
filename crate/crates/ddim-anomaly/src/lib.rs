//! File formats, toy datasets, configuration and the operator commands
//! around [`ddim_anomaly_core`].

pub mod backend;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod parallel;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
