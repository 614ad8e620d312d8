//! Experiment runner for the noise-robust cross-modal hashing library.
//!
//! [`spec::ExperimentSpec`] describes the data, the training settings and the
//! sweep grid; [`experiment`] turns a spec into trained models and result
//! CSVs; [`summary`] pivots those CSVs into variant × noise-rate tables.

pub mod error;
pub mod experiment;
pub mod spec;
pub mod summary;

pub use error::{CliError, Result};
pub use spec::ExperimentSpec;
