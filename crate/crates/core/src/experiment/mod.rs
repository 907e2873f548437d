//! End-to-end experiment runs and their output files.

mod config;
mod dataset;
mod metrics;
mod runner;

use thiserror::Error;

pub use config::{Algorithm, ExperimentConfig, Mode, SocketConfig};
pub use dataset::{read_dataset, write_dataset, DatasetHeader};
pub use metrics::{
    cumulative_error, macro_average, mean_sparsity, sparsity_trace, write_curve_csv,
    write_per_task_csv, write_sparsity_csv, MetricsRecord, SparsityRow,
};
pub use runner::{
    build_spout, compare, generate_dataset, run_experiment, write_dataset_file, write_outputs,
    CompareTable,
    RunReport, RunSummary,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Math(#[from] crate::math::MathError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Node(#[from] crate::worker::NodeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
