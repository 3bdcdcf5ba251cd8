#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use forge_core::blobstore::BlobStore;
use forge_core::bundle::template::starter_archive;
use forge_core::bundle::BundleLimits;
use forge_core::catalog::{insert_competition, upsert_dataset, CompetitionRow};
use forge_core::clock::{Clock, ManualClock};
use forge_core::eval::{DatasetRef, EvaluationRecord, Metric, SandboxPolicy, Visibility, Worker, WorkerConfig};
use forge_core::fixtures::{model_bundle, FixtureModel};
use forge_core::intake::submit;
use forge_core::leaderboard::{CompetitionSpec, Direction, Phase};
use forge_core::registry::Registry;
use forge_core::store::{Store, StoreError};

pub const COMPETITION: &str = "toy";
pub const HIDDEN: &str = "toy-hidden";

pub fn t0() -> DateTime<Utc> {
    DateTime::from_timestamp(1_767_225_600, 0).unwrap() // 2026-01-01T00:00:00Z
}

pub fn toy_spec() -> CompetitionSpec {
    CompetitionSpec {
        competition_id: COMPETITION.into(),
        title: "Toy parity".into(),
        description: "Predict the parity of an integer.".into(),
        primary_metric: Metric::Accuracy,
        direction: Direction::Maximize,
        secondary_metrics: vec![Metric::MacroF1],
        phases: vec![Phase { phase_id: "main".into(), opens_at: t0(), closes_at: t0() + Duration::days(30) }],
        daily_quota: 5,
        hidden_dataset: HIDDEN.into(),
        public_dataset: None,
        reward_text: String::new(),
    }
}

/// Evaluation limits small enough that failure cases finish quickly.
pub fn fast_policy() -> SandboxPolicy {
    SandboxPolicy {
        startup_timeout_s: 5.0,
        per_record_timeout_s: 2.0,
        total_timeout_s: 20.0,
        exit_timeout_s: 3.0,
        ..SandboxPolicy::default()
    }
}

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub store: Store,
    pub blobs: BlobStore,
    pub clock: Arc<ManualClock>,
    pub registry: Registry,
}

/// Writes inputs/labels files and registers the dataset.
pub fn add_dataset(h: &Harness, id: &str, rows: &[(&str, serde_json::Value, serde_json::Value)], visibility: Visibility) -> DatasetRef {
    let dir = h.dir.path().join("datasets").join(id);
    std::fs::create_dir_all(&dir).unwrap();
    let mut inputs = String::new();
    let mut labels = String::new();
    for (rid, input, label) in rows {
        inputs += &format!("{}\n", serde_json::json!({"id": rid, "input": input}));
        labels += &format!("{}\n", serde_json::json!({"id": rid, "label": label}));
    }
    std::fs::write(dir.join("inputs.ndjson"), inputs).unwrap();
    std::fs::write(dir.join("labels.ndjson"), labels).unwrap();
    let d = DatasetRef {
        dataset_id: id.into(),
        inputs_path: dir.join("inputs.ndjson"),
        labels_path: dir.join("labels.ndjson"),
        visibility,
    };
    h.store.write(|tx| upsert_dataset(tx, &d, rows.len())).unwrap();
    d
}

/// Inputs 1,2,3,5 with parity labels 1,0,1,1.
pub fn toy_rows() -> Vec<(&'static str, serde_json::Value, serde_json::Value)> {
    use serde_json::json;
    vec![("r1", json!(1), json!(1)), ("r2", json!(2), json!(0)), ("r3", json!(3), json!(1)), ("r4", json!(5), json!(1))]
}

impl Harness {
    pub fn new() -> Self {
        Self::with_spec(toy_spec())
    }

    pub fn with_spec(spec: CompetitionSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(&dir.path().join("forge.db")).unwrap();
        let blobs = BlobStore::open(dir.path().join("blobs")).unwrap();
        let clock = Arc::new(ManualClock::new(t0() + Duration::hours(1)));
        let registry = Registry::new(store.clone(), blobs.clone(), clock.clone());
        let h = Harness { dir, store, blobs, clock, registry };
        let template_ref = h.blobs.put(&starter_archive(&spec.competition_id).unwrap()).unwrap();
        let row = CompetitionRow { spec: spec.clone(), template_ref, created_by: "org".into(), created_at: h.clock.now() };
        assert!(h.store.write(|tx| insert_competition(tx, &row)).unwrap());
        add_dataset(&h, &spec.hidden_dataset, &toy_rows(), Visibility::HiddenEval);
        h
    }

    pub fn scratch(&self) -> PathBuf {
        self.dir.path().join("scratch")
    }

    pub fn worker(&self, id: &str, policy: SandboxPolicy) -> Worker {
        Worker::new(
            self.store.clone(),
            self.blobs.clone(),
            self.registry.clone(),
            self.clock.clone(),
            WorkerConfig { worker_id: id.into(), policy, scratch_root: self.scratch(), idle_sleep: std::time::Duration::from_millis(20) },
        )
    }

    pub fn submit_blob(&self, team: &str, blob: &[u8]) -> EvaluationRecord {
        let (_, record) =
            submit(&self.store, &self.blobs, COMPETITION, team, blob, &BundleLimits::default(), self.clock.now()).unwrap();
        record
    }

    pub fn submit(&self, team: &str, model: FixtureModel) -> EvaluationRecord {
        self.submit_blob(team, &model_bundle(model, COMPETITION, team))
    }

    /// Runs queued evaluations to completion, advancing the clock a second per record.
    pub fn drain(&self) -> Vec<EvaluationRecord> {
        let worker = self.worker("w-drain", fast_policy());
        let mut out = Vec::new();
        loop {
            self.clock.advance(Duration::seconds(1));
            match worker.run_once().unwrap() {
                forge_core::eval::Tick::Idle => return out,
                forge_core::eval::Tick::Completed { record, .. } => out.push(record),
            }
        }
    }

    pub fn records(&self) -> Vec<EvaluationRecord> {
        self.store
            .read(|tx| forge_core::eval::queue::list_in(tx, &Default::default()))
            .map_err(|e: StoreError| e)
            .unwrap()
    }
}

/// Records `blob` as a bundle for `team` and marks its hidden evaluation
/// finished with `accuracy` (or failed), without running a process.
pub fn fabricate_finished(h: &Harness, team: &str, blob: &[u8], accuracy: Option<f64>) -> String {
    use forge_core::bundle::{check_bundle, SubmissionBundle};
    use forge_core::catalog::{insert_bundle, next_bundle_id};
    use forge_core::eval::queue::{claim, complete, enqueue_in};
    use forge_core::eval::{ErrorClass, EvalStatus};

    let contents = check_bundle(blob, COMPETITION, &BundleLimits::default()).unwrap();
    let digest = h.blobs.put(blob).unwrap();
    let now = h.clock.now();
    let bundle_id = h
        .store
        .write(|tx| {
            let b = SubmissionBundle {
                bundle_id: next_bundle_id(tx)?,
                blob_digest: digest.clone(),
                manifest: contents.manifest.clone(),
                byte_size: contents.byte_size,
                submitted_at: now,
                team_id: team.into(),
            };
            insert_bundle(tx, &b)?;
            enqueue_in(tx, &b, HIDDEN, None, now).map_err(|e| StoreError::Corrupt(e.to_string()))?;
            Ok::<_, StoreError>(b.bundle_id)
        })
        .unwrap();
    let (mut rec, lease) = claim(&h.store, "test", now, Duration::seconds(60)).unwrap().unwrap();
    assert_eq!(rec.bundle_id, bundle_id);
    match accuracy {
        Some(a) => {
            rec.status = EvalStatus::Succeeded;
            rec.metrics.insert("accuracy".into(), a);
        }
        None => {
            rec.status = EvalStatus::Failed;
            rec.error_class = ErrorClass::NonzeroExit;
        }
    }
    rec.finished_at = Some(now);
    assert!(complete(&h.store, &lease, &rec).unwrap());
    bundle_id
}
