//! Accepting a submission: validate, store the blob, then check phase and
//! quota, record the bundle and enqueue its evaluation in one transaction.

use chrono::{DateTime, Utc};

use crate::blobstore::{BlobError, BlobStore};
use crate::bundle::{check_bundle, BundleError, BundleLimits, SubmissionBundle};
use crate::catalog::{get_competition, insert_bundle, next_bundle_id, submissions_on_day};
use crate::eval::queue::{enqueue_in, EnqueueError};
use crate::eval::EvaluationRecord;
use crate::leaderboard::{phase_at, submissions_remaining};
use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum IntakeError {
    #[error("unknown competition {0}")]
    UnknownCompetition(String),
    #[error("no phase of {0} is open")]
    PhaseClosed(String),
    #[error("daily quota of {0} submissions is used up")]
    QuotaExhausted(u32),
    #[error("manifest names team {found}, submitting team is {expected}")]
    TeamMismatch { expected: String, found: String },
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Enqueue(#[from] EnqueueError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Submits `blob` for `team_id`. The blob is validated and stored before
/// the transaction; a rejected submission may leave an unreferenced blob,
/// which is harmless in a content-addressed store.
pub fn submit(
    store: &Store,
    blobs: &BlobStore,
    competition_id: &str,
    team_id: &str,
    blob: &[u8],
    limits: &BundleLimits,
    now: DateTime<Utc>,
) -> Result<(SubmissionBundle, EvaluationRecord), IntakeError> {
    let contents = check_bundle(blob, competition_id, limits)?;
    if contents.manifest.team_id != team_id {
        return Err(IntakeError::TeamMismatch { expected: team_id.to_owned(), found: contents.manifest.team_id });
    }
    let digest = blobs.put(blob)?;
    store.write(|tx| {
        let competition =
            get_competition(tx, competition_id)?.ok_or_else(|| IntakeError::UnknownCompetition(competition_id.to_owned()))?;
        if phase_at(&competition.spec, now).is_none() {
            return Err(IntakeError::PhaseClosed(competition_id.to_owned()));
        }
        let used = submissions_on_day(tx, competition_id, team_id, now)?;
        if submissions_remaining(competition.spec.daily_quota, used) == 0 {
            return Err(IntakeError::QuotaExhausted(competition.spec.daily_quota));
        }
        let bundle = SubmissionBundle {
            bundle_id: next_bundle_id(tx)?,
            blob_digest: digest.clone(),
            manifest: contents.manifest.clone(),
            byte_size: contents.byte_size,
            submitted_at: now,
            team_id: team_id.to_owned(),
        };
        insert_bundle(tx, &bundle)?;
        let record = enqueue_in(tx, &bundle, &competition.spec.hidden_dataset, None, now)?;
        Ok((bundle, record))
    })
}
