//! Pipeline orchestration, artifact formats, and reports for risk-calibrated
//! step routing. The algorithms live in `riskroute-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod store;
pub mod theory;

pub use error::{CliError, CliResult};
