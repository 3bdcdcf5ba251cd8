//! The evaluation queue, persisted in the metadata store.
//!
//! Workers claim the oldest claimable record with a compare-and-set on
//! status and lease. A record whose lease has expired (its worker died) is
//! claimable again. Completion only lands if the caller still holds the
//! lease, so each record reaches exactly one terminal state.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use rusqlite::{params, OptionalExtension, Row, Transaction};

use super::record::{ErrorClass, EvalStatus, EvaluationRecord, ModelTarget};
use crate::bundle::SubmissionBundle;
use crate::catalog::{digest_col, get_bundle, get_dataset, ts_col};
use crate::clock::ts;
use crate::store::{sql, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum EnqueueError {
    #[error("unknown bundle {0}")]
    UnknownBundle(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("bundle {bundle_id} already has evaluation {existing} on {dataset_id}")]
    DuplicateEvaluation { bundle_id: String, dataset_id: String, existing: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Proof that a worker holds a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub eval_id: String,
    pub token: String,
    pub worker_id: String,
    pub expires_at: DateTime<Utc>,
}

const COLUMNS: &str = "eval_id, bundle_id, dataset_id, competition_id, team_id, status, error_class, error_detail,
    metrics_json, wall_time_s, log_ref, predictions_ref, enqueued_at, started_at, finished_at,
    target_model, target_version";

type RawRow = (
    (String, String, String, String, String, String, String, Option<String>),
    (String, f64, Option<String>, Option<String>, String, Option<String>, Option<String>),
    (Option<String>, Option<u32>),
);

fn raw_row(r: &Row<'_>) -> rusqlite::Result<RawRow> {
    Ok((
        (r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?, r.get(7)?),
        (r.get(8)?, r.get(9)?, r.get(10)?, r.get(11)?, r.get(12)?, r.get(13)?, r.get(14)?),
        (r.get(15)?, r.get(16)?),
    ))
}

fn decode(raw: RawRow) -> Result<EvaluationRecord, StoreError> {
    let ((eval_id, bundle_id, dataset_id, competition_id, team_id, status, error_class, error_detail), rest, target) = raw;
    let (metrics, wall_time_s, log_ref, predictions_ref, enqueued_at, started_at, finished_at) = rest;
    let metrics: BTreeMap<String, f64> = serde_json::from_str(&metrics)?;
    Ok(EvaluationRecord {
        eval_id,
        bundle_id,
        dataset_id,
        competition_id,
        team_id,
        status: EvalStatus::parse(&status).ok_or_else(|| StoreError::Corrupt(format!("status {status}")))?,
        error_class: ErrorClass::parse(&error_class)
            .ok_or_else(|| StoreError::Corrupt(format!("error_class {error_class}")))?,
        error_detail,
        metrics,
        wall_time_s,
        log_ref: log_ref.map(digest_col).transpose()?,
        predictions_ref: predictions_ref.map(digest_col).transpose()?,
        enqueued_at: ts_col(enqueued_at)?,
        started_at: started_at.map(ts_col).transpose()?,
        finished_at: finished_at.map(ts_col).transpose()?,
        target: match target {
            (Some(model_name), Some(version)) => Some(ModelTarget { model_name, version }),
            _ => None,
        },
    })
}

/// Enqueues `bundle` against `dataset_id` inside an open transaction.
pub fn enqueue_in(
    tx: &Transaction<'_>,
    bundle: &SubmissionBundle,
    dataset_id: &str,
    target: Option<&ModelTarget>,
    now: DateTime<Utc>,
) -> Result<EvaluationRecord, EnqueueError> {
    if get_dataset(tx, dataset_id)?.is_none() {
        return Err(EnqueueError::UnknownDataset(dataset_id.to_owned()));
    }
    let existing: Option<String> = sql(tx
        .query_row(
            "SELECT eval_id FROM evaluations WHERE bundle_id = ?1 AND dataset_id = ?2 AND status != 'failed'
             ORDER BY seq LIMIT 1",
            params![bundle.bundle_id, dataset_id],
            |r| r.get(0),
        )
        .optional())?;
    if let Some(existing) = existing {
        return Err(EnqueueError::DuplicateEvaluation {
            bundle_id: bundle.bundle_id.clone(),
            dataset_id: dataset_id.to_owned(),
            existing,
        });
    }
    let next: i64 = sql(tx.query_row("SELECT COALESCE(MAX(seq), 0) + 1 FROM evaluations", [], |r| r.get(0)))?;
    let record = EvaluationRecord {
        eval_id: format!("evl-{next:06}"),
        bundle_id: bundle.bundle_id.clone(),
        dataset_id: dataset_id.to_owned(),
        competition_id: bundle.manifest.competition_id.clone(),
        team_id: bundle.team_id.clone(),
        status: EvalStatus::Queued,
        error_class: ErrorClass::None,
        error_detail: None,
        metrics: BTreeMap::new(),
        wall_time_s: 0.0,
        log_ref: None,
        predictions_ref: None,
        enqueued_at: now,
        started_at: None,
        finished_at: None,
        target: target.cloned(),
    };
    sql(tx.execute(
        "INSERT INTO evaluations (eval_id, bundle_id, dataset_id, competition_id, team_id, status, error_class,
            metrics_json, wall_time_s, enqueued_at, target_model, target_version)
         VALUES (?1, ?2, ?3, ?4, ?5, 'queued', 'none', '{}', 0, ?6, ?7, ?8)",
        params![
            record.eval_id,
            record.bundle_id,
            record.dataset_id,
            record.competition_id,
            record.team_id,
            ts(now),
            target.map(|t| t.model_name.clone()),
            target.map(|t| t.version)
        ],
    ))?;
    Ok(record)
}

pub fn enqueue(store: &Store, bundle_id: &str, dataset_id: &str, now: DateTime<Utc>) -> Result<EvaluationRecord, EnqueueError> {
    store.write(|tx| {
        let bundle = get_bundle(tx, bundle_id)?.ok_or_else(|| EnqueueError::UnknownBundle(bundle_id.to_owned()))?;
        enqueue_in(tx, &bundle, dataset_id, None, now)
    })
}

/// Claims the oldest queued record, or a running one whose lease expired.
pub fn claim(
    store: &Store,
    worker_id: &str,
    now: DateTime<Utc>,
    lease_for: Duration,
) -> Result<Option<(EvaluationRecord, Lease)>, StoreError> {
    store.write(|tx| {
        let candidate: Option<String> = sql(tx
            .query_row(
                "SELECT eval_id FROM evaluations
                 WHERE status = 'queued' OR (status = 'running' AND lease_expires_at <= ?1)
                 ORDER BY seq LIMIT 1",
                [ts(now)],
                |r| r.get(0),
            )
            .optional())?;
        let Some(eval_id) = candidate else { return Ok(None) };
        let lease = Lease {
            eval_id: eval_id.clone(),
            token: uuid::Uuid::new_v4().to_string(),
            worker_id: worker_id.to_owned(),
            expires_at: now + lease_for,
        };
        sql(tx.execute(
            "UPDATE evaluations SET status = 'running', lease_token = ?2, lease_owner = ?3, lease_expires_at = ?4,
                started_at = ?5, attempts = attempts + 1
             WHERE eval_id = ?1",
            params![eval_id, lease.token, lease.worker_id, ts(lease.expires_at), ts(now)],
        ))?;
        let record = get_in(tx, &eval_id)?.ok_or_else(|| StoreError::Corrupt("claimed record vanished".into()))?;
        Ok(Some((record, lease)))
    })
}

/// Persists a terminal record if `lease` is still current. Returns false if
/// the lease was lost (expired and re-claimed by another worker).
pub fn complete(store: &Store, lease: &Lease, record: &EvaluationRecord) -> Result<bool, StoreError> {
    assert!(record.status.is_terminal(), "complete() needs a terminal record");
    store.write(|tx| {
        let n = sql(tx.execute(
            "UPDATE evaluations SET status = ?3, error_class = ?4, error_detail = ?5, metrics_json = ?6,
                wall_time_s = ?7, log_ref = ?8, predictions_ref = ?9, started_at = ?10, finished_at = ?11,
                completions = completions + 1, lease_token = NULL, lease_owner = NULL, lease_expires_at = NULL
             WHERE eval_id = ?1 AND status = 'running' AND lease_token = ?2",
            params![
                lease.eval_id,
                lease.token,
                record.status.as_str(),
                record.error_class.as_str(),
                record.error_detail,
                serde_json::to_string(&record.metrics)?,
                record.wall_time_s,
                record.log_ref.as_ref().map(|d| d.to_string()),
                record.predictions_ref.as_ref().map(|d| d.to_string()),
                record.started_at.map(ts),
                record.finished_at.map(ts)
            ],
        ))?;
        Ok(n == 1)
    })
}

pub fn get_in(tx: &Transaction<'_>, eval_id: &str) -> Result<Option<EvaluationRecord>, StoreError> {
    let raw = sql(tx
        .query_row(&format!("SELECT {COLUMNS} FROM evaluations WHERE eval_id = ?1"), [eval_id], raw_row)
        .optional())?;
    raw.map(decode).transpose()
}

pub fn get(store: &Store, eval_id: &str) -> Result<Option<EvaluationRecord>, StoreError> {
    store.read(|tx| get_in(tx, eval_id))
}

/// Filters for [`list_in`]; all conditions are conjunctive.
#[derive(Debug, Clone, Default)]
pub struct EvalFilter<'a> {
    pub competition_id: Option<&'a str>,
    pub dataset_id: Option<&'a str>,
    pub bundle_id: Option<&'a str>,
    pub status: Option<EvalStatus>,
}

pub fn list_in(tx: &Transaction<'_>, f: &EvalFilter<'_>) -> Result<Vec<EvaluationRecord>, StoreError> {
    let query = format!(
        "SELECT {COLUMNS} FROM evaluations
         WHERE (?1 IS NULL OR competition_id = ?1) AND (?2 IS NULL OR dataset_id = ?2)
           AND (?3 IS NULL OR bundle_id = ?3) AND (?4 IS NULL OR status = ?4)
         ORDER BY seq"
    );
    let mut stmt = sql(tx.prepare(&query))?;
    let raws = sql(stmt
        .query_map(params![f.competition_id, f.dataset_id, f.bundle_id, f.status.map(EvalStatus::as_str)], raw_row)
        .and_then(|it| it.collect::<Result<Vec<_>, _>>()))?;
    raws.into_iter().map(decode).collect()
}

/// How many times a record's terminal state has been written.
pub fn completion_count(store: &Store, eval_id: &str) -> Result<u32, StoreError> {
    store.read(|tx| sql(tx.query_row("SELECT completions FROM evaluations WHERE eval_id = ?1", [eval_id], |r| r.get(0))))
}
