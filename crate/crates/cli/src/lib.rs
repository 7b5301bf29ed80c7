//! Benchmark harness around `s2o-core`: S2OT tensor files, synthetic
//! inputs, configuration sweeps with JSON/CSV reports, and heatmaps.

pub mod cli;
pub mod heatmap;
pub mod sweep;
pub mod tensor_file;

pub use sweep::{run_sweep, RunConfig, SweepReport, Variant};
pub use tensor_file::{load_tensor_file, save_tensor_file};
