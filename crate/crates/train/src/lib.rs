//! Training harness: configuration, the simulated data-parallel worker group,
//! metrics, checkpoints and reports.

pub mod allreduce;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod harness;
pub mod metrics;

pub use allreduce::{allreduce_bytes, allreduce_grads, ring_factor};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{auto_eval_interval, parse_config, TrainConfig};
pub use export::{eval_checkpoint, export_quantized, labels_path_for, model_from_checkpoint};
pub use harness::{evaluate, iterations_per_epoch, prepare_data, train, TrainOutcome};
pub use metrics::{report, Event, EventKind, MetricsRow, Report};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] thaw_core::Error),
    #[error(transparent)]
    Pipeline(#[from] thaw_runtime::RuntimeError),
    #[error("{0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("run aborted at iteration {iteration}: {message}")]
    Aborted { iteration: u64, message: String },
}

impl TrainError {
    /// Process exit code: 1 for configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) => 1,
            _ => 2,
        }
    }
}
