//! Experiment configuration, the runner behind the CLI, and result files.

mod config;
mod output;
mod runner;

pub use config::{
    BaselineSettings, CovarianceSpec, ExperimentConfig, ExperimentKind, MismatchKind, MismatchSettings,
    MomentSettings, OutputFormat, ProtocolSettings, RateSettings, TrainingSettings,
};
pub use output::{emit_results, read_csv, read_jsonl, read_rows, sort_rows, write_rows, ResultRow, CSV_HEADER};
pub use runner::{limit_tv, run_experiment, run_experiment_partial, RunOutput};
