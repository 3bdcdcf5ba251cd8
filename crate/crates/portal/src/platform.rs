//! Every platform operation, with its role check, over one data directory.
//! HTTP handlers and the admin CLI both call into this.

use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use forge_core::blobstore::BlobStore;
use forge_core::bundle::template::starter_archive;
use forge_core::bundle::BundleContents;
use forge_core::catalog::{self, CompetitionRow};
use forge_core::clock::{Clock, SystemClock};
use forge_core::eval::queue::{self, enqueue_in, EvalFilter};
use forge_core::eval::{split_combined, DatasetRef, EvaluationRecord, ModelTarget, Visibility, Worker, WorkerConfig};
use forge_core::gate::{default_ruleset, GateReport, Ruleset};
use forge_core::intake;
use forge_core::leaderboard::{compute_leaderboard, phase_at, submissions_remaining, CompetitionSpec, LeaderboardEntry};
use forge_core::registry::{MetricAuditEntry, ModelVersion, Registry, Stage, StageTransition};
use forge_core::serving::{
    DashboardRow, PipelineDescriptor, PipelineStage, ServiceDescriptor, ServiceManager, ServiceStatus, ServingConfig,
};
use forge_core::store::Store;
use serde::Serialize;
use serde_json::value::RawValue;
use serde_json::Value;

use crate::auth::{insert_principal, new_token, principal_by_token, Principal, Role};
use crate::config::{Layout, PlatformConfig};
use crate::error::ApiError;
use crate::teams::{self, Team};

const MANAGERS: &[Role] = &[Role::Organizer, Role::ProductTeam];
const ANYONE: &[Role] = &[Role::Organizer, Role::Participant, Role::ProductTeam];
const LOG_TAIL_BYTES: usize = 4096;

#[derive(Debug, Clone, Serialize)]
pub struct CompetitionView {
    #[serde(flatten)]
    pub spec: CompetitionSpec,
    pub template_ref: String,
    pub created_at: chrono::DateTime<chrono::Utc>,
    /// Id of the phase open right now, if any.
    pub open_phase: Option<String>,
    /// The caller's team and what is left of its quota today.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub team_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub submissions_remaining: Option<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubmissionView {
    #[serde(flatten)]
    pub record: EvaluationRecord,
    pub log_tail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    #[serde(flatten)]
    pub model: ModelVersion,
    pub service_status: Option<ServiceStatus>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelDetail {
    #[serde(flatten)]
    pub model: ModelVersion,
    pub gate_report: Option<GateReport>,
    pub transitions: Vec<StageTransition>,
    pub metrics_history: Vec<MetricAuditEntry>,
    pub service: Option<ServiceDescriptor>,
}

/// Where a dataset's records come from when it is registered.
#[derive(Debug, Clone)]
pub enum DatasetSource<'a> {
    /// One NDJSON file of `{"id", "input", "label"}` objects.
    Combined(&'a Path),
    Split { inputs: &'a Path, labels: &'a Path },
}

pub struct Platform {
    layout: Layout,
    config: PlatformConfig,
    store: Store,
    blobs: BlobStore,
    registry: Registry,
    clock: Arc<dyn Clock>,
    ruleset: Ruleset,
    serving: Arc<ServiceManager>,
}

impl Platform {
    /// Opens the data directory with its `forge.yaml` and the system clock.
    pub fn open(data_dir: &Path) -> anyhow::Result<Self> {
        let config = PlatformConfig::load(data_dir)?;
        Self::open_with(data_dir, config, Arc::new(SystemClock))
    }

    pub fn open_with(data_dir: &Path, config: PlatformConfig, clock: Arc<dyn Clock>) -> anyhow::Result<Self> {
        let layout = Layout::new(data_dir);
        std::fs::create_dir_all(&layout.root)?;
        let store = Store::open(&layout.database())?;
        let blobs = BlobStore::open(layout.blobs())?;
        let registry = Registry::new(store.clone(), blobs.clone(), clock.clone());
        let rules_path = layout.gate_rules();
        let ruleset = if rules_path.exists() { Ruleset::load(&rules_path)? } else { default_ruleset() };
        let serving = Arc::new(ServiceManager::new(
            registry.clone(),
            blobs.clone(),
            clock.clone(),
            ServingConfig {
                policy: config.sandbox.clone(),
                services_root: layout.services(),
                capacity: config.serving_capacity,
            },
        ));
        Ok(Self { layout, config, store, blobs, registry, clock, ruleset, serving })
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn serving(&self) -> &Arc<ServiceManager> {
        &self.serving
    }

    pub fn ruleset(&self) -> &Ruleset {
        &self.ruleset
    }

    // Principals

    pub fn authenticate(&self, token: Option<&str>) -> Result<Principal, ApiError> {
        let token = token.ok_or_else(ApiError::unauthenticated)?;
        self.store.read(|tx| principal_by_token(tx, token))?.ok_or_else(ApiError::unauthenticated)
    }

    /// Creates a principal and returns it with its token, which is shown
    /// exactly once.
    pub fn mint_token(&self, display_name: &str, role: Role) -> Result<(Principal, String), ApiError> {
        let token = new_token();
        let now = self.clock.now();
        let principal = self.store.write(|tx| insert_principal(tx, display_name, role, &token, now))?;
        Ok((principal, token))
    }

    // Datasets

    /// Copies the records under the data directory and registers them.
    pub fn register_dataset(
        &self,
        dataset_id: &str,
        source: DatasetSource<'_>,
        visibility: Visibility,
    ) -> Result<(DatasetRef, usize), ApiError> {
        crate::teams::validate_team_id(dataset_id)
            .map_err(|_| ApiError::new(422, "DATASET_INVALID", format!("dataset id {dataset_id:?} must be 1-64 of [A-Za-z0-9_-]")))?;
        let dir = self.layout.datasets().join(dataset_id);
        let io = |e: std::io::Error| ApiError::internal(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(&dir).map_err(io)?;
        let (inputs_path, labels_path) = match source {
            DatasetSource::Combined(path) => split_combined(path, &dir)?,
            DatasetSource::Split { inputs, labels } => {
                let (i, l) = (dir.join("inputs.ndjson"), dir.join("labels.ndjson"));
                std::fs::copy(inputs, &i).map_err(io)?;
                std::fs::copy(labels, &l).map_err(io)?;
                (i, l)
            }
        };
        let dataset = DatasetRef { dataset_id: dataset_id.to_owned(), inputs_path, labels_path, visibility };
        let count = dataset.load()?.len();
        self.store.write(|tx| catalog::upsert_dataset(tx, &dataset, count))?;
        Ok((dataset, count))
    }

    pub fn datasets(&self) -> Result<Vec<(DatasetRef, usize)>, ApiError> {
        Ok(self.store.read(|tx| catalog::list_datasets(tx))?)
    }

    // Competitions

    pub fn create_competition(&self, spec: CompetitionSpec, actor: &Principal) -> Result<CompetitionRow, ApiError> {
        actor.require(&[Role::Organizer])?;
        spec.validate()?;
        let template = starter_archive(&spec.competition_id)?;
        let template_ref = self.blobs.put(&template)?;
        let row = CompetitionRow { spec, template_ref, created_by: actor.principal_id.clone(), created_at: self.clock.now() };
        if !self.store.write(|tx| catalog::insert_competition(tx, &row))? {
            return Err(ApiError::new(409, "DUPLICATE_ID", format!("competition {} exists", row.spec.competition_id)));
        }
        tracing::info!(competition_id = %row.spec.competition_id, "competition created");
        Ok(row)
    }

    fn competition_row(&self, competition_id: &str) -> Result<CompetitionRow, ApiError> {
        self.store
            .read(|tx| catalog::get_competition(tx, competition_id))?
            .ok_or_else(|| ApiError::not_found("UNKNOWN_COMPETITION", format!("unknown competition {competition_id}")))
    }

    fn view(&self, row: CompetitionRow, actor: Option<&Principal>) -> Result<CompetitionView, ApiError> {
        let now = self.clock.now();
        let id = row.spec.competition_id.clone();
        let (team_id, remaining) = match actor {
            Some(p) if p.role == Role::Participant => self.store.read(|tx| {
                let Some(team) = teams::team_of(tx, &id, &p.principal_id)? else { return Ok::<_, ApiError>((None, None)) };
                let used = catalog::submissions_on_day(tx, &id, &team, now)?;
                Ok((Some(team), Some(submissions_remaining(row.spec.daily_quota, used))))
            })?,
            _ => (None, None),
        };
        Ok(CompetitionView {
            open_phase: phase_at(&row.spec, now).map(|p| p.phase_id.clone()),
            template_ref: row.template_ref.as_str().to_owned(),
            created_at: row.created_at,
            spec: row.spec,
            team_id,
            submissions_remaining: remaining,
        })
    }

    pub fn competitions(&self) -> Result<Vec<CompetitionView>, ApiError> {
        let rows = self.store.read(|tx| catalog::list_competitions(tx))?;
        rows.into_iter().map(|r| self.view(r, None)).collect()
    }

    pub fn competition(&self, competition_id: &str, actor: Option<&Principal>) -> Result<CompetitionView, ApiError> {
        let row = self.competition_row(competition_id)?;
        self.view(row, actor)
    }

    /// The starter archive attached at creation.
    pub fn template(&self, competition_id: &str) -> Result<Vec<u8>, ApiError> {
        let row = self.competition_row(competition_id)?;
        Ok(self.blobs.get(&row.template_ref)?)
    }

    pub fn join_team(&self, competition_id: &str, team_id: &str, actor: &Principal) -> Result<Team, ApiError> {
        actor.require(&[Role::Participant])?;
        self.competition_row(competition_id)?;
        let now = self.clock.now();
        self.store.write(|tx| teams::join(tx, competition_id, team_id, &actor.principal_id, now))
    }

    pub fn teams(&self, competition_id: &str) -> Result<Vec<Team>, ApiError> {
        self.competition_row(competition_id)?;
        Ok(self.store.read(|tx| teams::list(tx, competition_id))?)
    }

    pub fn submit(&self, competition_id: &str, blob: &[u8], actor: &Principal) -> Result<EvaluationRecord, ApiError> {
        actor.require(&[Role::Participant])?;
        self.competition_row(competition_id)?;
        let team = self
            .store
            .read(|tx| teams::team_of(tx, competition_id, &actor.principal_id))?
            .ok_or_else(|| ApiError::forbidden(format!("join a team in {competition_id} before submitting")))?;
        let (bundle, record) =
            intake::submit(&self.store, &self.blobs, competition_id, &team, blob, &self.config.bundle_limits, self.clock.now())?;
        tracing::info!(bundle_id = %bundle.bundle_id, eval_id = %record.eval_id, team = %team, "submission accepted");
        Ok(record)
    }

    pub fn leaderboard(&self, competition_id: &str) -> Result<Vec<LeaderboardEntry>, ApiError> {
        let (row, records) = self.store.read(|tx| {
            let row = catalog::get_competition(tx, competition_id)?
                .ok_or_else(|| ApiError::not_found("UNKNOWN_COMPETITION", format!("unknown competition {competition_id}")))?;
            let filter = EvalFilter {
                competition_id: Some(competition_id),
                dataset_id: Some(&row.spec.hidden_dataset),
                ..EvalFilter::default()
            };
            let records = queue::list_in(tx, &filter)?;
            Ok::<_, ApiError>((row, records))
        })?;
        Ok(compute_leaderboard(&records, &row.spec)?)
    }

    /// An evaluation record with the end of its stderr log. Participants
    /// only see their own team's records.
    pub fn submission(&self, eval_id: &str, actor: &Principal) -> Result<SubmissionView, ApiError> {
        let record = queue::get(&self.store, eval_id)?
            .ok_or_else(|| ApiError::not_found("UNKNOWN_SUBMISSION", format!("unknown submission {eval_id}")))?;
        if actor.role == Role::Participant {
            let team = self.store.read(|tx| teams::team_of(tx, &record.competition_id, &actor.principal_id))?;
            if team.as_deref() != Some(record.team_id.as_str()) {
                return Err(ApiError::forbidden("submission belongs to another team"));
            }
        }
        let log_tail = match &record.log_ref {
            Some(d) => {
                let bytes = self.blobs.get(d)?;
                let start = bytes.len().saturating_sub(LOG_TAIL_BYTES);
                String::from_utf8_lossy(&bytes[start..]).into_owned()
            }
            None => String::new(),
        };
        Ok(SubmissionView { record, log_tail })
    }

    // Registry

    pub fn harvest(&self, bundle_id: &str, actor: &Principal) -> Result<ModelVersion, ApiError> {
        actor.require(MANAGERS)?;
        let model = self.registry.harvest(bundle_id)?;
        tracing::info!(model = %model.model_name, version = model.version, "harvested");
        Ok(model)
    }

    pub fn models(&self, stage: Option<Stage>, prefix: Option<&str>, actor: &Principal) -> Result<Vec<ModelSummary>, ApiError> {
        actor.require(MANAGERS)?;
        let models = self.registry.list_models(stage, prefix)?;
        Ok(models
            .into_iter()
            .map(|model| {
                let service_status = self.serving.descriptor(&model.model_name, model.version).map(|d| d.status);
                ModelSummary { model, service_status }
            })
            .collect())
    }

    pub fn model(&self, model_name: &str, version: u32, actor: &Principal) -> Result<ModelDetail, ApiError> {
        actor.require(MANAGERS)?;
        let model = self.registry.get(model_name, version)?;
        Ok(ModelDetail {
            gate_report: self.registry.gate_report(&model)?,
            transitions: self.registry.transitions(model_name, version)?,
            metrics_history: self.registry.audit_trail(model_name, version, None)?,
            service: self.serving.descriptor(model_name, version),
            model,
        })
    }

    /// Scans the version's bundle with the platform ruleset and attaches
    /// the report.
    pub fn gate(&self, model: &ModelVersion) -> Result<GateReport, ApiError> {
        let blob = self.registry.binary(model)?;
        let contents = BundleContents::open(&blob, &self.config.bundle_limits)?;
        let report = self.ruleset.scan(&model.source_bundle_id, &contents, self.clock.now());
        self.registry.attach_gate_report(&model.model_name, model.version, &report)?;
        Ok(report)
    }

    /// Moves a version to `to`. Promoting to validated runs the gate
    /// first; archiving stops its service. Repeating a promotion that
    /// already happened returns the version unchanged.
    pub fn promote(&self, model_name: &str, version: u32, to: Stage, actor: &Principal) -> Result<ModelVersion, ApiError> {
        actor.require(MANAGERS)?;
        let model = self.registry.get(model_name, version)?;
        if model.stage == to {
            return Ok(model);
        }
        if to == Stage::Validated && model.stage.can_become(to) {
            let report = self.gate(&model)?;
            tracing::info!(model_name, version, verdict = ?report.verdict, findings = report.findings.len(), "gate scan");
        }
        self.registry.transition_stage(model_name, version, to, &actor.principal_id)?;
        if to == Stage::Archived && self.serving.descriptor(model_name, version).is_some() {
            self.serving.stop(model_name, version)?;
        }
        Ok(self.registry.get(model_name, version)?)
    }

    pub fn serve(&self, model_name: &str, version: u32, actor: &Principal) -> Result<ServiceDescriptor, ApiError> {
        actor.require(MANAGERS)?;
        Ok(self.serving.materialize(model_name, version)?)
    }

    pub fn stop(&self, model_name: &str, version: u32, actor: &Principal) -> Result<ServiceDescriptor, ApiError> {
        actor.require(MANAGERS)?;
        Ok(self.serving.stop(model_name, version)?)
    }

    /// Queues an evaluation of the version's bundle on another dataset; the
    /// worker logs the metrics back to the registry when it succeeds.
    pub fn reevaluate(
        &self,
        model_name: &str,
        version: u32,
        dataset_id: &str,
        actor: &Principal,
    ) -> Result<EvaluationRecord, ApiError> {
        actor.require(MANAGERS)?;
        let model = self.registry.get(model_name, version)?;
        let now = self.clock.now();
        self.store.write(|tx| {
            let dataset = catalog::get_dataset(tx, dataset_id)?
                .ok_or_else(|| ApiError::not_found("UNKNOWN_DATASET", format!("unknown dataset {dataset_id}")))?;
            if dataset.visibility == Visibility::PublicTrain {
                return Err(ApiError::new(
                    422,
                    "DATASET_NOT_ELIGIBLE",
                    format!("dataset {dataset_id} is public_train; re-evaluation needs proprietary or hidden_eval data"),
                ));
            }
            let bundle = catalog::get_bundle(tx, &model.source_bundle_id)?
                .ok_or_else(|| ApiError::internal(format!("bundle {} of {model_name}/{version} is missing", model.source_bundle_id)))?;
            let target = ModelTarget { model_name: model_name.to_owned(), version };
            Ok(enqueue_in(tx, &bundle, dataset_id, Some(&target), now)?)
        })
    }

    // Serving

    pub fn predict(&self, model_name: &str, version: u32, input: &Value, actor: &Principal) -> Result<Box<RawValue>, ApiError> {
        actor.require(ANYONE)?;
        Ok(self.serving.invoke(model_name, version, input)?)
    }

    pub fn api_doc(&self, model_name: &str, version: u32, actor: &Principal) -> Result<Vec<u8>, ApiError> {
        actor.require(ANYONE)?;
        Ok(self.serving.api_doc(model_name, version)?)
    }

    pub fn health(&self, model_name: &str, version: u32, actor: &Principal) -> Result<ServiceStatus, ApiError> {
        actor.require(ANYONE)?;
        Ok(self.serving.probe(model_name, version)?)
    }

    pub fn dashboard(&self, actor: &Principal) -> Result<Vec<DashboardRow>, ApiError> {
        actor.require(ANYONE)?;
        Ok(self.serving.dashboard_snapshot()?)
    }

    pub fn compose_pipeline(&self, stages: Vec<PipelineStage>, actor: &Principal) -> Result<PipelineDescriptor, ApiError> {
        actor.require(MANAGERS)?;
        Ok(self.serving.compose_pipeline(stages)?)
    }

    pub fn pipelines(&self, actor: &Principal) -> Result<Vec<PipelineDescriptor>, ApiError> {
        actor.require(ANYONE)?;
        Ok(self.serving.list_pipelines())
    }

    pub fn pipeline(&self, pipeline_id: &str, actor: &Principal) -> Result<PipelineDescriptor, ApiError> {
        actor.require(ANYONE)?;
        self.serving
            .pipeline(pipeline_id)
            .ok_or_else(|| ApiError::not_found("UNKNOWN_PIPELINE", format!("unknown pipeline {pipeline_id}")))
    }

    pub fn invoke_pipeline(&self, pipeline_id: &str, input: &Value, actor: &Principal) -> Result<Box<RawValue>, ApiError> {
        actor.require(ANYONE)?;
        Ok(self.serving.invoke_pipeline(pipeline_id, input)?)
    }

    /// Starts every version in stage serving. Failures are logged and
    /// skipped so one broken model does not keep the server down.
    pub fn restore_services(&self) -> Result<usize, ApiError> {
        let mut started = 0;
        for m in self.registry.list_models(Some(Stage::Serving), None)? {
            match self.serving.materialize(&m.model_name, m.version) {
                Ok(_) => started += 1,
                Err(e) => tracing::warn!(model = %m.model_name, version = m.version, "not restored: {e}"),
            }
        }
        Ok(started)
    }

    pub fn spawn_prober(&self, shutdown: Arc<AtomicBool>) -> std::thread::JoinHandle<()> {
        self.serving.spawn_prober(Duration::from_secs(self.config.probe_interval_s.max(1)), shutdown)
    }

    // Evaluation

    pub fn worker(&self, worker_id: &str) -> Worker {
        Worker::new(
            self.store.clone(),
            self.blobs.clone(),
            self.registry.clone(),
            self.clock.clone(),
            WorkerConfig {
                worker_id: worker_id.to_owned(),
                policy: self.config.sandbox.clone(),
                scratch_root: self.layout.scratch(),
                idle_sleep: Duration::from_millis(500),
            },
        )
    }

    /// Evaluates queued records on the calling thread until the queue is empty.
    pub fn drain(&self) -> Result<Vec<EvaluationRecord>, ApiError> {
        Ok(self.worker("drain").drain()?)
    }
}
