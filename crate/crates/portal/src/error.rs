//! API errors: a stable machine code, an HTTP status and a message.

use forge_core::blobstore::BlobError;
use forge_core::bundle::BundleError;
use forge_core::eval::queue::EnqueueError;
use forge_core::eval::DatasetError;
use forge_core::intake::IntakeError;
use forge_core::leaderboard::{LeaderboardError, SpecError};
use forge_core::registry::RegistryError;
use forge_core::serving::ServingError;
use forge_core::store::StoreError;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn unauthenticated() -> Self {
        Self::new(401, "UNAUTHENTICATED", "a valid bearer token is required")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(403, "FORBIDDEN", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "BAD_REQUEST", message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(404, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(500, "INTERNAL", message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        tracing::error!("store: {e}");
        ApiError::internal(e.to_string())
    }
}

impl From<BlobError> for ApiError {
    fn from(e: BlobError) -> Self {
        tracing::error!("blob store: {e}");
        ApiError::internal(e.to_string())
    }
}

impl From<SpecError> for ApiError {
    fn from(e: SpecError) -> Self {
        ApiError::new(422, "SPEC_INVALID", e.0)
    }
}

impl From<BundleError> for ApiError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Io(_) => ApiError::internal(e.to_string()),
            _ => ApiError::new(422, "BUNDLE_INVALID", e.to_string()),
        }
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        ApiError::new(422, "DATASET_INVALID", e.to_string())
    }
}

impl From<LeaderboardError> for ApiError {
    fn from(e: LeaderboardError) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl From<EnqueueError> for ApiError {
    fn from(e: EnqueueError) -> Self {
        let msg = e.to_string();
        match e {
            EnqueueError::UnknownBundle(_) => ApiError::not_found("UNKNOWN_BUNDLE", msg),
            EnqueueError::UnknownDataset(_) => ApiError::not_found("UNKNOWN_DATASET", msg),
            EnqueueError::DuplicateEvaluation { .. } => ApiError::new(409, "DUPLICATE_EVALUATION", msg),
            EnqueueError::Store(s) => s.into(),
        }
    }
}

impl From<IntakeError> for ApiError {
    fn from(e: IntakeError) -> Self {
        let msg = e.to_string();
        match e {
            IntakeError::UnknownCompetition(_) => ApiError::not_found("UNKNOWN_COMPETITION", msg),
            IntakeError::PhaseClosed(_) => ApiError::new(409, "PHASE_CLOSED", msg),
            IntakeError::QuotaExhausted(_) => ApiError::new(429, "QUOTA_EXHAUSTED", msg),
            IntakeError::TeamMismatch { .. } => ApiError::new(422, "BUNDLE_INVALID", msg),
            IntakeError::Bundle(b) => b.into(),
            IntakeError::Enqueue(q) => q.into(),
            IntakeError::Blob(b) => b.into(),
            IntakeError::Store(s) => s.into(),
        }
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let msg = e.to_string();
        match e {
            RegistryError::UnknownBundle(_) => ApiError::not_found("UNKNOWN_BUNDLE", msg),
            RegistryError::UnknownVersion(..) => ApiError::not_found("UNKNOWN_MODEL_VERSION", msg),
            RegistryError::NoSucceededEvaluation(_) => ApiError::new(409, "NO_SUCCEEDED_EVALUATION", msg),
            RegistryError::IllegalTransition { .. } => ApiError::new(409, "ILLEGAL_TRANSITION", msg),
            RegistryError::GateNotPassed => ApiError::new(409, "GATE_NOT_PASSED", msg),
            RegistryError::GateReportMismatch { .. } | RegistryError::TamperedLog(_) => ApiError::internal(msg),
            RegistryError::NonFiniteMetric(_) => ApiError::new(422, "NON_FINITE_METRIC", msg),
            RegistryError::Blob(b) => b.into(),
            RegistryError::Store(s) => s.into(),
        }
    }
}

impl From<ServingError> for ApiError {
    fn from(e: ServingError) -> Self {
        let msg = e.to_string();
        match e {
            ServingError::NotInServingStage { .. } => ApiError::new(409, "NOT_IN_SERVING_STAGE", msg),
            ServingError::StartupFailed(_) => ApiError::new(502, "STARTUP_FAILED", msg),
            ServingError::CapacityExhausted(_) => ApiError::new(503, "CAPACITY_EXHAUSTED", msg),
            ServingError::UnknownService(..) => ApiError::not_found("UNKNOWN_SERVICE", msg),
            ServingError::ServiceUnhealthy(..) => ApiError::new(503, "SERVICE_UNHEALTHY", msg),
            ServingError::Timeout => ApiError::new(504, "TIMEOUT", msg),
            ServingError::ProtocolViolation(_) => ApiError::new(502, "PROTOCOL_VIOLATION", msg),
            ServingError::SchemaInvalid(_) => ApiError::new(422, "SCHEMA_INVALID", msg),
            ServingError::EmptyPipeline => ApiError::new(422, "EMPTY_PIPELINE", msg),
            ServingError::StageNotServing(_) => ApiError::new(409, "STAGE_NOT_SERVING", msg),
            ServingError::UnknownPipeline(_) => ApiError::not_found("UNKNOWN_PIPELINE", msg),
            ServingError::Registry(r) => r.into(),
            ServingError::Blob(b) => b.into(),
            ServingError::Bundle(b) => ApiError::internal(b.to_string()),
            ServingError::Io(_) => ApiError::internal(msg),
        }
    }
}
