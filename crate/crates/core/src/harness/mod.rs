//! Experiment orchestration: configuration, the `t1 x t2` run protocol,
//! aggregation into bounds, CSV and loss-table output, plots and the CLI.

pub mod aggregate;
pub mod checks;
pub mod cli;
pub mod config;
pub mod output;
pub mod plot;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

pub use aggregate::{cell_estimates, empirical_gap, evaluate_bounds, EvalSettings};
pub use cli::cli_main;
pub use config::{load_config, parse_config, BoundName, ConfigError, EnvSpec, ExperimentConfig, TrainerKind};
pub use output::{read_csv, read_loss_tables, write_csv, write_loss_tables, CsvRow};
pub use runner::{mix64, run_experiment, ExperimentResult, RunRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),

    #[error(transparent)]
    Idx(#[from] crate::tasks::IdxError),

    #[error(transparent)]
    Supersample(#[from] crate::supersample::SupersampleError),

    #[error(transparent)]
    Train(#[from] crate::metalearn::TrainError),

    #[error(transparent)]
    Model(#[from] crate::model::ModelError),

    #[error(transparent)]
    Bound(#[from] crate::bounds::BoundError),

    #[error(transparent)]
    Info(#[from] crate::infotheory::InfoError),

    #[error("no loss tables to aggregate")]
    NoTables,

    #[error("all {failures} runs failed; first failure: {first}")]
    AllRunsFailed { failures: usize, first: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("thread pool: {0}")]
    Pool(String),

    #[error("check failed: {0}")]
    Check(String),
}
