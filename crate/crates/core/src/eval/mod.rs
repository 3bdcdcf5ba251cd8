//! Evaluation: datasets, metrics, the sandboxed predict protocol, and the
//! queue that workers drain.

pub mod dataset;
pub mod metrics;
pub mod protocol;
pub mod queue;
pub mod record;
pub mod runner;
pub mod sandbox;
pub mod worker;

pub use dataset::{split_combined, Dataset, DatasetError, DatasetRef, Visibility};
pub use metrics::{score, score_by_id, Metric, ScoreError};
pub use protocol::{Exit, ModelProcess, ProtocolError, StderrCapture};
pub use record::{ErrorClass, EvalStatus, EvaluationRecord, ModelTarget};
pub use runner::{run_evaluation, RunContext};
pub use sandbox::SandboxPolicy;
pub use worker::{Backoff, Tick, Worker, WorkerConfig};
