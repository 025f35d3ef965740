//! Experiment runner: training, evaluation, orthogonality analysis,
//! fixed-point calibration and reports, all writing CSV/JSON artifacts under
//! `<outdir>/<run-id>/`.

pub mod analyze;
pub mod calibrate;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod run;
pub mod size;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
