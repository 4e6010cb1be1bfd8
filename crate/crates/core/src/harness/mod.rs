//! The experiment suite: configuration, single runs, grids, the
//! class-incremental protocol and result files.

pub mod config;
pub mod experiment;
pub mod gdumb;
pub mod report;
pub mod sweep;

pub use config::{parse_axis, ExperimentConfig};
pub use experiment::{run_experiment, RunRecord};
pub use gdumb::{gdumb_incremental, GdumbRecord, GdumbStep};
pub use report::{emit_gdumb, emit_report, ReportFiles};
pub use sweep::{expand_grid, grid_sweep, Axis};
