//! Versioned models harvested from successful submissions.
//!
//! Versions of a model are numbered 1..N without gaps: the next number is
//! assigned inside the same write transaction that inserts the row. Stage
//! changes are logged to an append-only table whose entries carry their own
//! digest, checked whenever the log is read back.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rusqlite::{params, OptionalExtension, Row, Transaction};
use serde::{Deserialize, Serialize};

use crate::blobstore::{BlobError, BlobStore};
use crate::catalog::{digest_col, get_bundle, get_competition, ts_col};
use crate::clock::{ts, Clock};
use crate::digest::{compute_digest, Digest};
use crate::eval::queue::{list_in, EvalFilter};
use crate::eval::EvalStatus;
use crate::gate::{GateReport, Verdict};
use crate::store::{sql, Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Harvested,
    Validated,
    Serving,
    Archived,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Harvested, Stage::Validated, Stage::Serving, Stage::Archived];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Harvested => "harvested",
            Stage::Validated => "validated",
            Stage::Serving => "serving",
            Stage::Archived => "archived",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Stage::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Whether `self -> to` is a legal stage change.
    pub fn can_become(self, to: Stage) -> bool {
        use Stage::*;
        matches!(
            (self, to),
            (Harvested, Validated) | (Validated, Serving) | (Serving, Archived) | (Harvested, Archived) | (Validated, Archived)
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub model_name: String,
    pub version: u32,
    pub source_bundle_id: String,
    pub competition_id: String,
    pub hyper_parameters: BTreeMap<String, String>,
    /// dataset_id -> metric_id -> value
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    pub binary_ref: Digest,
    pub stage: Stage,
    pub gate_report_ref: Option<Digest>,
    pub gate_verdict: Option<Verdict>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTransition {
    pub model_name: String,
    pub version: u32,
    pub from_stage: Stage,
    pub to_stage: Stage,
    pub actor: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAuditEntry {
    pub model_name: String,
    pub version: u32,
    pub dataset_id: String,
    pub metrics: BTreeMap<String, f64>,
    pub logged_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown bundle {0}")]
    UnknownBundle(String),
    #[error("bundle {0} has no succeeded evaluation on its hidden dataset")]
    NoSucceededEvaluation(String),
    #[error("unknown model version {0}/{1}")]
    UnknownVersion(String, u32),
    #[error("illegal stage transition {from} -> {to}")]
    IllegalTransition { from: Stage, to: Stage },
    #[error("serving requires a passing gate report")]
    GateNotPassed,
    #[error("gate report is for bundle {report}, not {expected}")]
    GateReportMismatch { report: String, expected: String },
    #[error("metric {0} is not finite")]
    NonFiniteMetric(String),
    #[error("transition log entry {0} failed digest verification")]
    TamperedLog(i64),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<rusqlite::Error> for RegistryError {
    fn from(e: rusqlite::Error) -> Self {
        RegistryError::Store(e.into())
    }
}

#[derive(Clone)]
pub struct Registry {
    store: Store,
    blobs: BlobStore,
    clock: Arc<dyn Clock>,
}

const COLUMNS: &str = "model_name, version, source_bundle_id, competition_id, hyper_json, metrics_json, binary_ref, stage,
    gate_report_ref, gate_verdict, created_at";

type RawModel = (String, u32, String, String, String, String, String, String, Option<String>, Option<String>, String);

fn raw_model(r: &Row<'_>) -> rusqlite::Result<RawModel> {
    Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?, r.get(7)?, r.get(8)?, r.get(9)?, r.get(10)?))
}

fn decode(r: RawModel) -> Result<ModelVersion, StoreError> {
    let verdict = match r.9.as_deref() {
        None => None,
        Some("pass") => Some(Verdict::Pass),
        Some("fail") => Some(Verdict::Fail),
        Some(other) => return Err(StoreError::Corrupt(format!("gate verdict {other}"))),
    };
    Ok(ModelVersion {
        model_name: r.0,
        version: r.1,
        source_bundle_id: r.2,
        competition_id: r.3,
        hyper_parameters: serde_json::from_str(&r.4)?,
        metrics: serde_json::from_str(&r.5)?,
        binary_ref: digest_col(r.6)?,
        stage: Stage::parse(&r.7).ok_or_else(|| StoreError::Corrupt(format!("stage {}", r.7)))?,
        gate_report_ref: r.8.map(digest_col).transpose()?,
        gate_verdict: verdict,
        created_at: ts_col(r.10)?,
    })
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
    }
}

pub fn get_model_in(tx: &Transaction<'_>, model_name: &str, version: u32) -> Result<Option<ModelVersion>, StoreError> {
    let raw = sql(tx
        .query_row(
            &format!("SELECT {COLUMNS} FROM models WHERE model_name = ?1 AND version = ?2"),
            params![model_name, version],
            raw_model,
        )
        .optional())?;
    raw.map(decode).transpose()
}

fn require(tx: &Transaction<'_>, model_name: &str, version: u32) -> Result<ModelVersion, RegistryError> {
    get_model_in(tx, model_name, version)?.ok_or_else(|| RegistryError::UnknownVersion(model_name.to_owned(), version))
}

fn model_by_bundle(tx: &Transaction<'_>, bundle_id: &str) -> Result<Option<ModelVersion>, StoreError> {
    let raw = sql(tx
        .query_row(&format!("SELECT {COLUMNS} FROM models WHERE source_bundle_id = ?1"), [bundle_id], raw_model)
        .optional())?;
    raw.map(decode).transpose()
}

/// Default model name for a team's submissions to a competition.
pub fn default_model_name(competition_id: &str, team_id: &str) -> String {
    format!("{competition_id}/{team_id}")
}

impl Registry {
    pub fn new(store: Store, blobs: BlobStore, clock: Arc<dyn Clock>) -> Self {
        Self { store, blobs, clock }
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    /// Registers the bundle as the next version of its team's model.
    /// Harvesting the same bundle again returns the existing version.
    pub fn harvest(&self, bundle_id: &str) -> Result<ModelVersion, RegistryError> {
        let now = self.clock.now();
        self.store.write(|tx| {
            if let Some(existing) = model_by_bundle(tx, bundle_id)? {
                return Ok(existing);
            }
            let bundle = get_bundle(tx, bundle_id)?.ok_or_else(|| RegistryError::UnknownBundle(bundle_id.to_owned()))?;
            let competition_id = &bundle.manifest.competition_id;
            let competition = get_competition(tx, competition_id)?
                .ok_or_else(|| StoreError::Corrupt(format!("bundle {bundle_id} names unknown competition {competition_id}")))?;
            let hidden = &competition.spec.hidden_dataset;
            let succeeded = list_in(
                tx,
                &EvalFilter {
                    bundle_id: Some(bundle_id),
                    dataset_id: Some(hidden),
                    status: Some(EvalStatus::Succeeded),
                    ..Default::default()
                },
            )?;
            let Some(eval) = succeeded.into_iter().next() else {
                return Err(RegistryError::NoSucceededEvaluation(bundle_id.to_owned()));
            };
            // The blob was stored at submission; make sure it is still intact.
            self.blobs.get(&bundle.blob_digest)?;

            let model_name = default_model_name(competition_id, &bundle.team_id);
            let version: u32 = tx.query_row(
                "SELECT COALESCE(MAX(version), 0) + 1 FROM models WHERE model_name = ?1",
                [&model_name],
                |r| r.get(0),
            )?;
            let model = ModelVersion {
                model_name,
                version,
                source_bundle_id: bundle_id.to_owned(),
                competition_id: competition_id.clone(),
                hyper_parameters: bundle.manifest.hyper_parameters.clone(),
                metrics: BTreeMap::from([(hidden.clone(), eval.metrics)]),
                binary_ref: bundle.blob_digest.clone(),
                stage: Stage::Harvested,
                gate_report_ref: None,
                gate_verdict: None,
                created_at: now,
            };
            tx.execute(
                "INSERT INTO models (model_name, version, source_bundle_id, competition_id, hyper_json, metrics_json,
                    binary_ref, stage, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
                params![
                    model.model_name,
                    model.version,
                    model.source_bundle_id,
                    model.competition_id,
                    serde_json::to_string(&model.hyper_parameters).map_err(StoreError::from)?,
                    serde_json::to_string(&model.metrics).map_err(StoreError::from)?,
                    model.binary_ref.as_str(),
                    model.stage.as_str(),
                    ts(now)
                ],
            )?;
            Ok(model)
        })
    }

    pub fn get(&self, model_name: &str, version: u32) -> Result<ModelVersion, RegistryError> {
        self.store.read(|tx| require(tx, model_name, version))
    }

    /// Lists versions ordered by (model_name, version). Filters combine.
    pub fn list_models(&self, stage: Option<Stage>, prefix: Option<&str>) -> Result<Vec<ModelVersion>, RegistryError> {
        self.store.read(|tx| {
            let mut stmt = tx.prepare(&format!(
                "SELECT {COLUMNS} FROM models
                 WHERE (?1 IS NULL OR stage = ?1) AND (?2 IS NULL OR substr(model_name, 1, length(?2)) = ?2)
                 ORDER BY model_name, version"
            ))?;
            let raws = stmt
                .query_map(params![stage.map(Stage::as_str), prefix], raw_model)?
                .collect::<Result<Vec<_>, _>>()?;
            Ok(raws.into_iter().map(decode).collect::<Result<_, _>>()?)
        })
    }

    /// Stores `report` and records it on the version. The report must be
    /// for the version's source bundle.
    pub fn attach_gate_report(
        &self,
        model_name: &str,
        version: u32,
        report: &GateReport,
    ) -> Result<ModelVersion, RegistryError> {
        let bytes = serde_json::to_vec(report).map_err(StoreError::from)?;
        let digest = self.blobs.put(&bytes)?;
        self.store.write(|tx| {
            let mut model = require(tx, model_name, version)?;
            if report.bundle_id != model.source_bundle_id {
                return Err(RegistryError::GateReportMismatch {
                    report: report.bundle_id.clone(),
                    expected: model.source_bundle_id,
                });
            }
            tx.execute(
                "UPDATE models SET gate_report_ref = ?3, gate_verdict = ?4 WHERE model_name = ?1 AND version = ?2",
                params![model_name, version, digest.as_str(), verdict_str(report.verdict)],
            )?;
            model.gate_report_ref = Some(digest);
            model.gate_verdict = Some(report.verdict);
            Ok(model)
        })
    }

    /// Loads the attached gate report, verifying its blob digest.
    pub fn gate_report(&self, model: &ModelVersion) -> Result<Option<GateReport>, RegistryError> {
        let Some(d) = &model.gate_report_ref else { return Ok(None) };
        let bytes = self.blobs.get(d)?;
        Ok(Some(serde_json::from_slice(&bytes).map_err(StoreError::from)?))
    }

    pub fn transition_stage(
        &self,
        model_name: &str,
        version: u32,
        to: Stage,
        actor: &str,
    ) -> Result<StageTransition, RegistryError> {
        let at = self.clock.now();
        self.store.write(|tx| {
            let model = require(tx, model_name, version)?;
            let from = model.stage;
            if !from.can_become(to) {
                return Err(RegistryError::IllegalTransition { from, to });
            }
            if to == Stage::Serving {
                let passed = self.gate_report(&model)?.is_some_and(|r| r.passed());
                if !passed {
                    return Err(RegistryError::GateNotPassed);
                }
            }
            let changed = tx.execute(
                "UPDATE models SET stage = ?3 WHERE model_name = ?1 AND version = ?2 AND stage = ?4",
                params![model_name, version, to.as_str(), from.as_str()],
            )?;
            if changed != 1 {
                return Err(StoreError::Corrupt("stage changed underneath the transaction".into()).into());
            }
            let entry = StageTransition {
                model_name: model_name.to_owned(),
                version,
                from_stage: from,
                to_stage: to,
                actor: actor.to_owned(),
                at,
            };
            let json = serde_json::to_string(&entry).map_err(StoreError::from)?;
            tx.execute(
                "INSERT INTO stage_transitions (model_name, version, entry_json, entry_digest) VALUES (?1, ?2, ?3, ?4)",
                params![model_name, version, json, compute_digest(json.as_bytes()).as_str()],
            )?;
            Ok(entry)
        })
    }

    /// The transition log for one version, oldest first, digest-verified.
    pub fn transitions(&self, model_name: &str, version: u32) -> Result<Vec<StageTransition>, RegistryError> {
        self.store.read(|tx| {
            let mut stmt = tx.prepare(
                "SELECT seq, entry_json, entry_digest FROM stage_transitions
                 WHERE model_name = ?1 AND version = ?2 ORDER BY seq",
            )?;
            let rows = stmt
                .query_map(params![model_name, version], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?)))?
                .collect::<Result<Vec<_>, _>>()?;
            rows.into_iter()
                .map(|(seq, json, digest)| {
                    if compute_digest(json.as_bytes()).as_str() != digest {
                        return Err(RegistryError::TamperedLog(seq));
                    }
                    Ok(serde_json::from_str(&json).map_err(StoreError::from)?)
                })
                .collect()
        })
    }

    /// Records metrics for one dataset, replacing that dataset's previous
    /// values. Every call is also appended to the audit trail.
    pub fn log_metrics(
        &self,
        model_name: &str,
        version: u32,
        dataset_id: &str,
        metrics: &BTreeMap<String, f64>,
    ) -> Result<ModelVersion, RegistryError> {
        if let Some((k, _)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(RegistryError::NonFiniteMetric(k.clone()));
        }
        let now = self.clock.now();
        self.store.write(|tx| {
            let mut model = require(tx, model_name, version)?;
            model.metrics.insert(dataset_id.to_owned(), metrics.clone());
            let metrics_json = serde_json::to_string(metrics).map_err(StoreError::from)?;
            tx.execute(
                "UPDATE models SET metrics_json = ?3 WHERE model_name = ?1 AND version = ?2",
                params![model_name, version, serde_json::to_string(&model.metrics).map_err(StoreError::from)?],
            )?;
            tx.execute(
                "INSERT INTO metric_audit (model_name, version, dataset_id, metrics_json, logged_at)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
                params![model_name, version, dataset_id, metrics_json, ts(now)],
            )?;
            Ok(model)
        })
    }

    /// Metric history for a version, optionally for one dataset, oldest first.
    pub fn audit_trail(
        &self,
        model_name: &str,
        version: u32,
        dataset_id: Option<&str>,
    ) -> Result<Vec<MetricAuditEntry>, RegistryError> {
        self.store.read(|tx| {
            let mut stmt = tx.prepare(
                "SELECT dataset_id, metrics_json, logged_at FROM metric_audit
                 WHERE model_name = ?1 AND version = ?2 AND (?3 IS NULL OR dataset_id = ?3) ORDER BY seq",
            )?;
            let rows = stmt
                .query_map(params![model_name, version, dataset_id], |r| {
                    Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?))
                })?
                .collect::<Result<Vec<_>, _>>()?;
            rows.into_iter()
                .map(|(dataset_id, json, at)| {
                    Ok(MetricAuditEntry {
                        model_name: model_name.to_owned(),
                        version,
                        dataset_id,
                        metrics: serde_json::from_str(&json).map_err(StoreError::from)?,
                        logged_at: ts_col(at)?,
                    })
                })
                .collect()
        })
    }

    /// Reads the version's bundle bytes, verifying the digest.
    pub fn binary(&self, model: &ModelVersion) -> Result<Vec<u8>, RegistryError> {
        Ok(self.blobs.get(&model.binary_ref)?)
    }

    /// All versions as NDJSON, in list order.
    pub fn export_ndjson(&self) -> Result<Vec<u8>, RegistryError> {
        let mut out = Vec::new();
        for m in self.list_models(None, None)? {
            out.extend(serde_json::to_vec(&m).map_err(StoreError::from)?);
            out.push(b'\n');
        }
        Ok(out)
    }
}
