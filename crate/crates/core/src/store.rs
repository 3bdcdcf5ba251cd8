//! The embedded transactional metadata store.
//!
//! One SQLite database holds every record the platform keeps outside the
//! blob store. Writers take an immediate (reserved) transaction, so
//! conditional updates such as lease claims and quota checks are atomic
//! across threads and across processes sharing the data directory.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rusqlite::{Connection, TransactionBehavior};

pub use rusqlite::{params, OptionalExtension, Row, Transaction};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("store record corrupt: {0}")]
    Corrupt(String),
}

impl From<serde_json::Error> for StoreError {
    fn from(e: serde_json::Error) -> Self {
        StoreError::Corrupt(e.to_string())
    }
}

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS principals (
    principal_id TEXT PRIMARY KEY,
    display_name TEXT NOT NULL,
    role TEXT NOT NULL,
    token_hash TEXT NOT NULL UNIQUE,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS competitions (
    competition_id TEXT PRIMARY KEY,
    spec_json TEXT NOT NULL,
    template_ref TEXT NOT NULL,
    created_by TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS team_members (
    competition_id TEXT NOT NULL,
    team_id TEXT NOT NULL,
    principal_id TEXT NOT NULL,
    joined_at TEXT NOT NULL,
    PRIMARY KEY (competition_id, principal_id)
);
CREATE TABLE IF NOT EXISTS datasets (
    dataset_id TEXT PRIMARY KEY,
    inputs_path TEXT NOT NULL,
    labels_path TEXT NOT NULL,
    visibility TEXT NOT NULL,
    record_count INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS bundles (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    bundle_id TEXT NOT NULL UNIQUE,
    competition_id TEXT NOT NULL,
    team_id TEXT NOT NULL,
    blob_digest TEXT NOT NULL,
    byte_size INTEGER NOT NULL,
    manifest_json TEXT NOT NULL,
    submitted_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS bundles_by_team ON bundles (competition_id, team_id, submitted_at);
CREATE TABLE IF NOT EXISTS evaluations (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    eval_id TEXT NOT NULL UNIQUE,
    bundle_id TEXT NOT NULL,
    dataset_id TEXT NOT NULL,
    competition_id TEXT NOT NULL,
    team_id TEXT NOT NULL,
    status TEXT NOT NULL,
    error_class TEXT NOT NULL,
    error_detail TEXT,
    metrics_json TEXT NOT NULL,
    wall_time_s REAL NOT NULL,
    log_ref TEXT,
    predictions_ref TEXT,
    enqueued_at TEXT NOT NULL,
    started_at TEXT,
    finished_at TEXT,
    target_model TEXT,
    target_version INTEGER,
    lease_token TEXT,
    lease_owner TEXT,
    lease_expires_at TEXT,
    attempts INTEGER NOT NULL DEFAULT 0,
    completions INTEGER NOT NULL DEFAULT 0
);
CREATE INDEX IF NOT EXISTS evaluations_by_status ON evaluations (status, seq);
CREATE INDEX IF NOT EXISTS evaluations_by_pair ON evaluations (bundle_id, dataset_id);
CREATE TABLE IF NOT EXISTS models (
    model_name TEXT NOT NULL,
    version INTEGER NOT NULL,
    source_bundle_id TEXT NOT NULL UNIQUE,
    competition_id TEXT NOT NULL,
    hyper_json TEXT NOT NULL,
    metrics_json TEXT NOT NULL,
    binary_ref TEXT NOT NULL,
    stage TEXT NOT NULL,
    gate_report_ref TEXT,
    gate_verdict TEXT,
    created_at TEXT NOT NULL,
    PRIMARY KEY (model_name, version)
);
CREATE TABLE IF NOT EXISTS stage_transitions (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    model_name TEXT NOT NULL,
    version INTEGER NOT NULL,
    entry_json TEXT NOT NULL,
    entry_digest TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS metric_audit (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    model_name TEXT NOT NULL,
    version INTEGER NOT NULL,
    dataset_id TEXT NOT NULL,
    metrics_json TEXT NOT NULL,
    logged_at TEXT NOT NULL
);
CREATE TRIGGER IF NOT EXISTS stage_transitions_append_only
    BEFORE UPDATE ON stage_transitions
    BEGIN SELECT RAISE(ABORT, 'transition log is append-only'); END;
CREATE TRIGGER IF NOT EXISTS stage_transitions_no_delete
    BEFORE DELETE ON stage_transitions
    BEGIN SELECT RAISE(ABORT, 'transition log is append-only'); END;
"#;

#[derive(Clone)]
pub struct Store {
    conn: Arc<Mutex<Connection>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Store")
    }
}

impl Store {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn: Arc::new(Mutex::new(conn)) })
    }

    /// Runs `f` inside an immediate transaction, committing on `Ok`.
    pub fn write<T, E>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(StoreError::from)?;
        let out = f(&tx)?;
        tx.commit().map_err(StoreError::from)?;
        Ok(out)
    }

    /// Runs `f` against a consistent read snapshot.
    pub fn read<T, E>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Deferred)
            .map_err(StoreError::from)?;
        f(&tx)
    }
}

/// Maps a rusqlite error to [`StoreError`] inside `?` chains.
pub fn sql<T>(r: rusqlite::Result<T>) -> Result<T, StoreError> {
    r.map_err(StoreError::from)
}
