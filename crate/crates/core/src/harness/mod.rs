//! Experiment configuration, sweeps, metrics and figure data.

pub mod config;
pub mod metrics;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use metrics::{nmse, paired_bounds_95, symbol_error_rate};
pub use sweep::{cells, run_cell, run_sweep, Cell, CellResult, Method, MetricRow, Models};
