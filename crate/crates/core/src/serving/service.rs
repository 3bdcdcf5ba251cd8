//! Resident model services backed by child processes.
//!
//! Each served version gets one long-lived child speaking the same predict
//! protocol as evaluation. Requests to one service are serialized (the
//! protocol is strictly sequential); different services run in parallel.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;

use super::apidoc::{generate_api_doc, predict_route, IoSchema, SchemaInvalid};
use super::pipeline::PipelineDescriptor;
use crate::blobstore::{BlobError, BlobStore};
use crate::bundle::{BundleContents, BundleError, BundleLimits};
use crate::clock::Clock;
use crate::digest::Digest;
use crate::eval::protocol::{ModelProcess, ProtocolError, HEALTH_ID};
use crate::eval::SandboxPolicy;
use crate::registry::{Registry, RegistryError, Stage};

/// CPU and wall budget for a resident process; effectively unbounded.
const RESIDENT_BUDGET_S: f64 = 1.0e9;
pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_PROBE_INTERVAL: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceStatus {
    Starting,
    Healthy,
    Stopped,
    Unhealthy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub model_name: String,
    pub version: u32,
    pub route: String,
    pub api_doc_ref: Digest,
    pub status: ServiceStatus,
    pub started_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardRow {
    #[serde(flatten)]
    pub service: ServiceDescriptor,
    pub stage: Stage,
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServingError {
    #[error("{model_name}/{version} is in stage {stage}, not serving")]
    NotInServingStage { model_name: String, version: u32, stage: Stage },
    #[error("service failed to start: {0}")]
    StartupFailed(String),
    #[error("all {0} service slots are in use")]
    CapacityExhausted(usize),
    #[error("no service for {0}/{1}")]
    UnknownService(String, u32),
    #[error("service {0}/{1} is not healthy")]
    ServiceUnhealthy(String, u32),
    #[error("model did not answer within the request timeout")]
    Timeout,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error(transparent)]
    SchemaInvalid(#[from] SchemaInvalid),
    #[error("pipeline has no stages")]
    EmptyPipeline,
    #[error("pipeline stage {0} is not a healthy serving model")]
    StageNotServing(usize),
    #[error("unknown pipeline {0}")]
    UnknownPipeline(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("service workdir: {0}")]
    Io(#[from] std::io::Error),
}

struct Service {
    descriptor: Mutex<ServiceDescriptor>,
    process: Mutex<Option<ModelProcess>>,
    _workdir: tempfile::TempDir,
}

impl Service {
    fn status(&self) -> ServiceStatus {
        self.descriptor.lock().unwrap().status
    }

    fn set_status(&self, status: ServiceStatus) {
        self.descriptor.lock().unwrap().status = status;
    }

    /// Marks the service unhealthy and stops its process.
    fn fail(&self, process: &mut Option<ModelProcess>) {
        self.set_status(ServiceStatus::Unhealthy);
        if let Some(mut p) = process.take() {
            p.kill();
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServingConfig {
    /// Startup and per-request timeouts, memory and stderr caps.
    pub policy: SandboxPolicy,
    pub services_root: PathBuf,
    pub capacity: usize,
}

pub struct ServiceManager {
    registry: Registry,
    blobs: BlobStore,
    clock: Arc<dyn Clock>,
    config: ServingConfig,
    services: Mutex<BTreeMap<(String, u32), Arc<Service>>>,
    pub(super) pipelines: Mutex<BTreeMap<String, PipelineDescriptor>>,
}

impl ServiceManager {
    pub fn new(registry: Registry, blobs: BlobStore, clock: Arc<dyn Clock>, config: ServingConfig) -> Self {
        Self { registry, blobs, clock, config, services: Mutex::default(), pipelines: Mutex::default() }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn service(&self, model_name: &str, version: u32) -> Option<Arc<Service>> {
        self.services.lock().unwrap().get(&(model_name.to_owned(), version)).cloned()
    }

    fn resident_policy(&self) -> SandboxPolicy {
        SandboxPolicy { total_timeout_s: RESIDENT_BUDGET_S, ..self.config.policy.clone() }
    }

    /// Starts (or returns the already healthy) service for a serving version.
    pub fn materialize(&self, model_name: &str, version: u32) -> Result<ServiceDescriptor, ServingError> {
        let model = self.registry.get(model_name, version)?;
        if model.stage != Stage::Serving {
            return Err(ServingError::NotInServingStage { model_name: model_name.to_owned(), version, stage: model.stage });
        }
        let key = (model_name.to_owned(), version);
        {
            let services = self.services.lock().unwrap();
            if let Some(existing) = services.get(&key) {
                if existing.status() == ServiceStatus::Healthy {
                    return Ok(existing.descriptor.lock().unwrap().clone());
                }
            }
            let live = services
                .iter()
                .filter(|(k, s)| **k != key && matches!(s.status(), ServiceStatus::Healthy | ServiceStatus::Starting))
                .count();
            if live >= self.config.capacity {
                return Err(ServingError::CapacityExhausted(self.config.capacity));
            }
        }

        let doc = generate_api_doc(model_name, version, &IoSchema::any())?;
        let api_doc_ref = self.blobs.put(&doc.to_bytes())?;
        let contents = BundleContents::open(&self.registry.binary(&model)?, &BundleLimits::default())?;
        std::fs::create_dir_all(&self.config.services_root)?;
        let workdir = tempfile::Builder::new().prefix("svc-").tempdir_in(&self.config.services_root)?;
        let root = workdir.path().join("bundle");
        contents.extract_to(&root)?;

        let mut process = ModelProcess::spawn(&contents.manifest.entrypoints.predict, &root, &self.resident_policy())
            .map_err(|e| ServingError::StartupFailed(format!("could not start predict entrypoint: {e}")))?;
        if let Err(e) = process.await_ready() {
            process.kill();
            let tail = process.stderr_tail(2048);
            return Err(ServingError::StartupFailed(if tail.is_empty() { e.to_string() } else { format!("{e}; stderr: {tail}") }));
        }
        let descriptor = ServiceDescriptor {
            model_name: model_name.to_owned(),
            version,
            route: predict_route(model_name, version),
            api_doc_ref,
            status: ServiceStatus::Healthy,
            started_at: Some(self.clock.now()),
        };
        let service = Arc::new(Service {
            descriptor: Mutex::new(descriptor.clone()),
            process: Mutex::new(Some(process)),
            _workdir: workdir,
        });
        let previous = self.services.lock().unwrap().insert(key, service);
        if let Some(old) = previous {
            old.fail(&mut old.process.lock().unwrap());
        }
        tracing::info!(model_name, version, "service started");
        Ok(descriptor)
    }

    pub fn descriptor(&self, model_name: &str, version: u32) -> Option<ServiceDescriptor> {
        self.service(model_name, version).map(|s| s.descriptor.lock().unwrap().clone())
    }

    /// Pid of the backing process, if running.
    pub fn pid(&self, model_name: &str, version: u32) -> Option<u32> {
        let service = self.service(model_name, version)?;
        let guard = service.process.lock().unwrap();
        guard.as_ref().map(ModelProcess::pid)
    }

    /// Sends one input and returns the model's output bytes unchanged.
    pub fn invoke(&self, model_name: &str, version: u32, input: &Value) -> Result<Box<RawValue>, ServingError> {
        let service = self
            .service(model_name, version)
            .ok_or_else(|| ServingError::UnknownService(model_name.to_owned(), version))?;
        let unhealthy = || ServingError::ServiceUnhealthy(model_name.to_owned(), version);
        let mut guard = service.process.lock().unwrap();
        if service.status() != ServiceStatus::Healthy {
            return Err(unhealthy());
        }
        let Some(process) = guard.as_mut() else { return Err(unhealthy()) };
        let id = uuid::Uuid::new_v4().to_string();
        match process.request(&id, &input.to_string()) {
            Ok(out) => Ok(out),
            Err(e) => {
                service.fail(&mut guard);
                tracing::warn!(model_name, version, "service marked unhealthy: {e}");
                Err(match e {
                    ProtocolError::RecordTimeout | ProtocolError::TotalTimeout => ServingError::Timeout,
                    ProtocolError::Violation(_) | ProtocolError::MissingOutput(_) => ServingError::ProtocolViolation(e.to_string()),
                    ProtocolError::Closed | ProtocolError::StdinClosed(_) | ProtocolError::StartupTimeout => unhealthy(),
                })
            }
        }
    }

    /// Sends the health record; a service that fails it becomes unhealthy.
    pub fn probe(&self, model_name: &str, version: u32) -> Result<ServiceStatus, ServingError> {
        let service = self
            .service(model_name, version)
            .ok_or_else(|| ServingError::UnknownService(model_name.to_owned(), version))?;
        let mut guard = service.process.lock().unwrap();
        if service.status() != ServiceStatus::Healthy {
            return Ok(service.status());
        }
        let ok = match guard.as_mut() {
            Some(p) => p.request(HEALTH_ID, "null").is_ok(),
            None => false,
        };
        if !ok {
            service.fail(&mut guard);
            tracing::warn!(model_name, version, "health probe failed");
        }
        Ok(service.status())
    }

    pub fn probe_all(&self) {
        let keys: Vec<_> = self.services.lock().unwrap().keys().cloned().collect();
        for (name, version) in keys {
            let _ = self.probe(&name, version);
        }
    }

    /// Probes every service each `interval` until `shutdown` is set.
    pub fn spawn_prober(self: &Arc<Self>, interval: Duration, shutdown: Arc<AtomicBool>) -> thread::JoinHandle<()> {
        let me = Arc::clone(self);
        thread::spawn(move || {
            let step = Duration::from_millis(100).min(interval);
            let mut waited = Duration::ZERO;
            while !shutdown.load(Ordering::Relaxed) {
                thread::sleep(step);
                waited += step;
                if waited >= interval {
                    waited = Duration::ZERO;
                    me.probe_all();
                }
            }
        })
    }

    /// Stops the backing process; the descriptor stays listed as stopped.
    pub fn stop(&self, model_name: &str, version: u32) -> Result<ServiceDescriptor, ServingError> {
        let service = self
            .service(model_name, version)
            .ok_or_else(|| ServingError::UnknownService(model_name.to_owned(), version))?;
        let mut guard = service.process.lock().unwrap();
        if let Some(mut p) = guard.take() {
            p.kill();
        }
        service.set_status(ServiceStatus::Stopped);
        let d = service.descriptor.lock().unwrap().clone();
        Ok(d)
    }

    pub fn stop_all(&self) {
        let keys: Vec<_> = self.services.lock().unwrap().keys().cloned().collect();
        for (name, version) in keys {
            let _ = self.stop(&name, version);
        }
    }

    /// The stored OpenAPI document for a service.
    pub fn api_doc(&self, model_name: &str, version: u32) -> Result<Vec<u8>, ServingError> {
        let d = self
            .descriptor(model_name, version)
            .ok_or_else(|| ServingError::UnknownService(model_name.to_owned(), version))?;
        Ok(self.blobs.get(&d.api_doc_ref)?)
    }

    /// All services, ordered by (model_name, version), with registry metrics.
    pub fn dashboard_snapshot(&self) -> Result<Vec<DashboardRow>, ServingError> {
        let services: Vec<_> = self.services.lock().unwrap().values().cloned().collect();
        let mut rows = Vec::with_capacity(services.len());
        for s in services {
            let service = s.descriptor.lock().unwrap().clone();
            let model = self.registry.get(&service.model_name, service.version)?;
            rows.push(DashboardRow { service, stage: model.stage, metrics: model.metrics });
        }
        Ok(rows)
    }
}

impl Drop for ServiceManager {
    fn drop(&mut self) {
        self.stop_all();
    }
}
