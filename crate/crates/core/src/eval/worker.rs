//! The evaluation worker: claim, run, persist, repeat.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::dataset::DatasetRef;
use super::queue::{claim, complete, Lease};
use super::record::{ErrorClass, EvalStatus, EvaluationRecord};
use super::runner::{run_evaluation, RunContext};
use super::sandbox::SandboxPolicy;
use crate::blobstore::BlobStore;
use crate::bundle::SubmissionBundle;
use crate::catalog::{get_bundle, get_competition, get_dataset};
use crate::clock::Clock;
use crate::eval::Metric;
use crate::registry::Registry;
use crate::store::{Store, StoreError};

/// Exponential backoff for store errors.
#[derive(Debug, Clone)]
pub struct Backoff {
    base: Duration,
    cap: Duration,
    next: Duration,
}

impl Backoff {
    pub fn new(base: Duration, cap: Duration) -> Self {
        Self { base, cap, next: base }
    }

    /// The delay to wait now; doubles the following one up to the cap.
    pub fn next_delay(&mut self) -> Duration {
        let d = self.next;
        self.next = (self.next * 2).min(self.cap);
        d
    }

    pub fn reset(&mut self) {
        self.next = self.base;
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new(Duration::from_secs(1), Duration::from_secs(60))
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub policy: SandboxPolicy,
    pub scratch_root: PathBuf,
    /// Sleep between polls of an empty queue.
    pub idle_sleep: Duration,
}

#[derive(Clone)]
pub struct Worker {
    store: Store,
    blobs: BlobStore,
    registry: Registry,
    clock: Arc<dyn Clock>,
    config: WorkerConfig,
}

/// What [`Worker::run_once`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum Tick {
    Idle,
    /// Finished a record; `persisted` is false if the lease was lost first.
    Completed { record: EvaluationRecord, persisted: bool },
}

struct Job {
    bundle: SubmissionBundle,
    dataset: DatasetRef,
    metrics: Vec<Metric>,
}

impl Worker {
    pub fn new(store: Store, blobs: BlobStore, registry: Registry, clock: Arc<dyn Clock>, config: WorkerConfig) -> Self {
        Self { store, blobs, registry, clock, config }
    }

    /// Lease length: twice the total evaluation budget.
    pub fn lease_duration(&self) -> chrono::Duration {
        chrono::Duration::milliseconds((self.config.policy.total_timeout_s * 2000.0).ceil() as i64)
    }

    fn job_for(&self, record: &EvaluationRecord) -> Result<Result<Job, String>, StoreError> {
        self.store.read(|tx| {
            let Some(bundle) = get_bundle(tx, &record.bundle_id)? else {
                return Ok(Err(format!("bundle {} vanished", record.bundle_id)));
            };
            let Some(dataset) = get_dataset(tx, &record.dataset_id)? else {
                return Ok(Err(format!("dataset {} vanished", record.dataset_id)));
            };
            let Some(competition) = get_competition(tx, &record.competition_id)? else {
                return Ok(Err(format!("competition {} vanished", record.competition_id)));
            };
            Ok(Ok(Job { bundle, dataset, metrics: competition.spec.metrics() }))
        })
    }

    /// Claims and evaluates at most one record.
    pub fn run_once(&self) -> Result<Tick, StoreError> {
        let Some((record, lease)) = claim(&self.store, &self.config.worker_id, self.clock.now(), self.lease_duration())? else {
            return Ok(Tick::Idle);
        };
        tracing::info!(eval_id = %record.eval_id, bundle_id = %record.bundle_id, "evaluating");
        let finished = match self.job_for(&record)? {
            Ok(job) => {
                let ctx = RunContext {
                    blobs: &self.blobs,
                    scratch_root: &self.config.scratch_root,
                    policy: &self.config.policy,
                    clock: self.clock.as_ref(),
                };
                run_evaluation(&record, &job.bundle, &job.dataset, &job.metrics, &ctx)
            }
            Err(detail) => {
                let mut r = record.clone();
                r.status = EvalStatus::Failed;
                r.error_class = ErrorClass::Internal;
                r.error_detail = Some(detail);
                r.finished_at = Some(self.clock.now());
                r
            }
        };
        self.persist(finished, &lease)
    }

    fn persist(&self, record: EvaluationRecord, lease: &Lease) -> Result<Tick, StoreError> {
        let persisted = complete(&self.store, lease, &record)?;
        if !persisted {
            tracing::warn!(eval_id = %record.eval_id, "lease lost before completion; result discarded");
        } else {
            tracing::info!(eval_id = %record.eval_id, status = %record.status, error_class = %record.error_class, "evaluation finished");
            if let (EvalStatus::Succeeded, Some(target)) = (record.status, &record.target) {
                if let Err(e) = self.registry.log_metrics(&target.model_name, target.version, &record.dataset_id, &record.metrics) {
                    tracing::error!(eval_id = %record.eval_id, "could not log metrics to the registry: {e}");
                }
            }
        }
        Ok(Tick::Completed { record, persisted })
    }

    /// Drains the queue until it is empty. Used by tests and the CLI.
    pub fn drain(&self) -> Result<Vec<EvaluationRecord>, StoreError> {
        let mut done = Vec::new();
        while let Tick::Completed { record, .. } = self.run_once()? {
            done.push(record);
        }
        Ok(done)
    }

    /// Runs until `shutdown` is set. Store errors back off exponentially.
    pub fn run(&self, shutdown: &AtomicBool) {
        let mut backoff = Backoff::default();
        while !shutdown.load(Ordering::Relaxed) {
            match self.run_once() {
                Ok(Tick::Completed { .. }) => backoff.reset(),
                Ok(Tick::Idle) => {
                    backoff.reset();
                    sleep_unless(shutdown, self.config.idle_sleep);
                }
                Err(e) => {
                    let d = backoff.next_delay();
                    tracing::error!("store error, retrying in {d:?}: {e}");
                    sleep_unless(shutdown, d);
                }
            }
        }
    }
}

fn sleep_unless(shutdown: &AtomicBool, total: Duration) {
    let step = Duration::from_millis(50);
    let mut left = total;
    while !left.is_zero() && !shutdown.load(Ordering::Relaxed) {
        let d = left.min(step);
        thread::sleep(d);
        left -= d;
    }
}
