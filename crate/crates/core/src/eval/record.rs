use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl EvalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalStatus::Queued => "queued",
            EvalStatus::Running => "running",
            EvalStatus::Succeeded => "succeeded",
            EvalStatus::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EvalStatus::Queued, EvalStatus::Running, EvalStatus::Succeeded, EvalStatus::Failed]
            .into_iter()
            .find(|v| v.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, EvalStatus::Succeeded | EvalStatus::Failed)
    }

    /// queued -> running -> {succeeded, failed}
    pub fn can_become(self, next: EvalStatus) -> bool {
        matches!(
            (self, next),
            (EvalStatus::Queued, EvalStatus::Running)
                | (EvalStatus::Running, EvalStatus::Succeeded)
                | (EvalStatus::Running, EvalStatus::Failed)
        )
    }
}

impl fmt::Display for EvalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    None,
    StartupTimeout,
    RecordTimeout,
    ProtocolViolation,
    IncompletePredictions,
    NonzeroExit,
    ResourceLimit,
    /// The platform could not run the evaluation (unreadable dataset or
    /// bundle); not attributable to the submission.
    Internal,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 8] = [
        ErrorClass::None,
        ErrorClass::StartupTimeout,
        ErrorClass::RecordTimeout,
        ErrorClass::ProtocolViolation,
        ErrorClass::IncompletePredictions,
        ErrorClass::NonzeroExit,
        ErrorClass::ResourceLimit,
        ErrorClass::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::None => "none",
            ErrorClass::StartupTimeout => "startup_timeout",
            ErrorClass::RecordTimeout => "record_timeout",
            ErrorClass::ProtocolViolation => "protocol_violation",
            ErrorClass::IncompletePredictions => "incomplete_predictions",
            ErrorClass::NonzeroExit => "nonzero_exit",
            ErrorClass::ResourceLimit => "resource_limit",
            ErrorClass::Internal => "internal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ErrorClass::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A registry version that a re-evaluation reports back to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTarget {
    pub model_name: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub eval_id: String,
    pub bundle_id: String,
    pub dataset_id: String,
    pub competition_id: String,
    pub team_id: String,
    pub status: EvalStatus,
    pub error_class: ErrorClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    pub log_ref: Option<Digest>,
    /// NDJSON of `{"id", "output"}` lines exactly as the model produced them.
    pub predictions_ref: Option<Digest>,
    pub enqueued_at: DateTime<Utc>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ModelTarget>,
}

impl EvaluationRecord {
    /// Checks the status/error/metrics consistency rules.
    pub fn is_consistent(&self, primary_metric: Option<&str>) -> bool {
        match self.status {
            EvalStatus::Succeeded => {
                self.error_class == ErrorClass::None
                    && primary_metric.is_none_or(|m| self.metrics.contains_key(m))
            }
            EvalStatus::Failed => self.error_class != ErrorClass::None && self.metrics.is_empty(),
            EvalStatus::Queued | EvalStatus::Running => self.error_class == ErrorClass::None && self.metrics.is_empty(),
        }
    }
}
