//! Threads and storage around the training loop: the asynchronous
//! plasticity-evaluation pipeline and the on-disk activation cache.

pub mod cache;
pub mod metrics;
pub mod pipeline;
pub mod queue;

pub use metrics::{MetricsSnapshot, RuntimeMetrics};
pub use pipeline::{
    apply_decision, queue_set, spawn_controller, submit_evaluation, Controller, ControllerConfig,
    ControllerHandle, ControllerMessage, ControllerSide, DecisionInbox, DiscardReason, EvalRequest,
    EvalResult, Outcome, Source, WorkerSide,
};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Core(#[from] thaw_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("cache entry at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;
