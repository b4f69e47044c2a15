//! Experiment orchestration: run configuration, stage runners with
//! persisted artifacts, and plot-data export.

pub mod config;
pub mod pipeline;
pub mod plots;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, RunDir, Stages};
pub use plots::emit_plot_data;
