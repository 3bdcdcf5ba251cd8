//! Persistent competitions, datasets and submitted bundles.

use chrono::{DateTime, Utc};
use rusqlite::{params, OptionalExtension, Transaction};

use crate::bundle::{Manifest, SubmissionBundle};
use crate::clock::{parse_ts, ts};
use crate::digest::Digest;
use crate::eval::{DatasetRef, Visibility};
use crate::leaderboard::{utc_day, CompetitionSpec};
use crate::store::{sql, StoreError};

#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionRow {
    pub spec: CompetitionSpec,
    pub template_ref: Digest,
    pub created_by: String,
    pub created_at: DateTime<Utc>,
}

fn corrupt(what: &str) -> StoreError {
    StoreError::Corrupt(what.to_owned())
}

pub(crate) fn digest_col(s: String) -> Result<Digest, StoreError> {
    Digest::parse(&s).map_err(|e| StoreError::Corrupt(e.to_string()))
}

pub(crate) fn ts_col(s: String) -> Result<DateTime<Utc>, StoreError> {
    parse_ts(&s).ok_or_else(|| corrupt("timestamp"))
}

/// Returns false when the id is taken.
pub fn insert_competition(tx: &Transaction<'_>, row: &CompetitionRow) -> Result<bool, StoreError> {
    let n = sql(tx.execute(
        "INSERT OR IGNORE INTO competitions (competition_id, spec_json, template_ref, created_by, created_at)
         VALUES (?1, ?2, ?3, ?4, ?5)",
        params![
            row.spec.competition_id,
            serde_json::to_string(&row.spec)?,
            row.template_ref.as_str(),
            row.created_by,
            ts(row.created_at)
        ],
    ))?;
    Ok(n == 1)
}

fn competition_from_row(r: (String, String, String, String)) -> Result<CompetitionRow, StoreError> {
    Ok(CompetitionRow {
        spec: serde_json::from_str(&r.0)?,
        template_ref: digest_col(r.1)?,
        created_by: r.2,
        created_at: ts_col(r.3)?,
    })
}

pub fn get_competition(tx: &Transaction<'_>, competition_id: &str) -> Result<Option<CompetitionRow>, StoreError> {
    let row = sql(tx
        .query_row(
            "SELECT spec_json, template_ref, created_by, created_at FROM competitions WHERE competition_id = ?1",
            [competition_id],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
        )
        .optional())?;
    row.map(competition_from_row).transpose()
}

pub fn list_competitions(tx: &Transaction<'_>) -> Result<Vec<CompetitionRow>, StoreError> {
    let mut stmt = sql(tx.prepare(
        "SELECT spec_json, template_ref, created_by, created_at FROM competitions ORDER BY competition_id",
    ))?;
    let rows = sql(stmt
        .query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)))
        .and_then(|it| it.collect::<Result<Vec<_>, _>>()))?;
    rows.into_iter().map(competition_from_row).collect()
}

/// Inserts or replaces a dataset registration.
pub fn upsert_dataset(tx: &Transaction<'_>, d: &DatasetRef, record_count: usize) -> Result<(), StoreError> {
    sql(tx.execute(
        "INSERT INTO datasets (dataset_id, inputs_path, labels_path, visibility, record_count)
         VALUES (?1, ?2, ?3, ?4, ?5)
         ON CONFLICT (dataset_id) DO UPDATE SET inputs_path = ?2, labels_path = ?3, visibility = ?4, record_count = ?5",
        params![
            d.dataset_id,
            d.inputs_path.to_string_lossy(),
            d.labels_path.to_string_lossy(),
            d.visibility.as_str(),
            record_count as i64
        ],
    ))?;
    Ok(())
}

pub fn get_dataset(tx: &Transaction<'_>, dataset_id: &str) -> Result<Option<DatasetRef>, StoreError> {
    let row: Option<(String, String, String)> = sql(tx
        .query_row(
            "SELECT inputs_path, labels_path, visibility FROM datasets WHERE dataset_id = ?1",
            [dataset_id],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
        )
        .optional())?;
    row.map(|(i, l, v)| {
        Ok(DatasetRef {
            dataset_id: dataset_id.to_owned(),
            inputs_path: i.into(),
            labels_path: l.into(),
            visibility: Visibility::parse(&v).ok_or_else(|| corrupt("visibility"))?,
        })
    })
    .transpose()
}

pub fn list_datasets(tx: &Transaction<'_>) -> Result<Vec<(DatasetRef, usize)>, StoreError> {
    let ids: Vec<(String, i64)> = {
        let mut stmt = sql(tx.prepare("SELECT dataset_id, record_count FROM datasets ORDER BY dataset_id"))?;
        sql(stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?))).and_then(|it| it.collect()))?
    };
    ids.into_iter()
        .map(|(id, n)| Ok((get_dataset(tx, &id)?.ok_or_else(|| corrupt("dataset vanished"))?, n as usize)))
        .collect()
}

/// Allocates the next bundle id (`bnd-000001`, ...).
pub fn next_bundle_id(tx: &Transaction<'_>) -> Result<String, StoreError> {
    let next: i64 = sql(tx.query_row(
        "SELECT COALESCE(MAX(seq), 0) + 1 FROM bundles",
        [],
        |r| r.get(0),
    ))?;
    Ok(format!("bnd-{next:06}"))
}

pub fn insert_bundle(tx: &Transaction<'_>, b: &SubmissionBundle) -> Result<(), StoreError> {
    sql(tx.execute(
        "INSERT INTO bundles (bundle_id, competition_id, team_id, blob_digest, byte_size, manifest_json, submitted_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        params![
            b.bundle_id,
            b.manifest.competition_id,
            b.team_id,
            b.blob_digest.as_str(),
            b.byte_size as i64,
            serde_json::to_string(&b.manifest)?,
            ts(b.submitted_at)
        ],
    ))?;
    Ok(())
}

pub fn get_bundle(tx: &Transaction<'_>, bundle_id: &str) -> Result<Option<SubmissionBundle>, StoreError> {
    let row: Option<(String, String, i64, String, String)> = sql(tx
        .query_row(
            "SELECT team_id, blob_digest, byte_size, manifest_json, submitted_at FROM bundles WHERE bundle_id = ?1",
            [bundle_id],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?)),
        )
        .optional())?;
    row.map(|(team_id, digest, size, manifest, at)| {
        let manifest: Manifest = serde_json::from_str(&manifest)?;
        Ok(SubmissionBundle {
            bundle_id: bundle_id.to_owned(),
            blob_digest: digest_col(digest)?,
            manifest,
            byte_size: size as u64,
            submitted_at: ts_col(at)?,
            team_id,
        })
    })
    .transpose()
}

/// Bundles a team submitted to a competition during the UTC day of `now`.
pub fn submissions_on_day(
    tx: &Transaction<'_>,
    competition_id: &str,
    team_id: &str,
    now: DateTime<Utc>,
) -> Result<u64, StoreError> {
    let (start, end) = utc_day(now);
    let n: i64 = sql(tx.query_row(
        "SELECT COUNT(*) FROM bundles WHERE competition_id = ?1 AND team_id = ?2
         AND submitted_at >= ?3 AND submitted_at < ?4",
        params![competition_id, team_id, ts(start), ts(end)],
        |r| r.get(0),
    ))?;
    Ok(n as u64)
}
