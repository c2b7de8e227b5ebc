//! Experiment harness for `mbcd-core`: configuration files, multi-seed runs
//! with model selection, metric and checkpoint files, dataset export, sweeps
//! and plot data.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod plots;
pub mod record;
pub mod run;
pub mod table;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use experiment::{run_experiment, run_sweep, SweepAxis, SweepResult};
pub use mbcd_core;
pub use plots::{emit_plot_data, PlotKind};
pub use record::RunSummary;
