//! Experiment harness around the core library: declarative TOML configs,
//! checkpointed pipeline stages, and deterministic CSV/SVG reports.

pub mod artifacts;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod report;

pub use config::{load_config, ExperimentConfig, LoadedConfig};
pub use error::{CliError, Result, EXIT_CONFIG, EXIT_PARTIAL};
pub use experiment::RunReport;
pub use pipeline::{run_experiment, Ctx};
