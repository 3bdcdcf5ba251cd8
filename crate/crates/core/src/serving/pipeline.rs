//! Sequential pipelines: each stage's output is the next stage's input.

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;

use super::service::{ServiceManager, ServiceStatus, ServingError};
use crate::digest::compute_digest;
use crate::registry::Stage;

/// A served model version, or a previously composed pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PipelineStage {
    Model { model_name: String, version: u32 },
    Pipeline { pipeline_id: String },
}

impl PipelineStage {
    pub fn model(model_name: &str, version: u32) -> Self {
        PipelineStage::Model { model_name: model_name.to_owned(), version }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDescriptor {
    pub pipeline_id: String,
    pub stages: Vec<PipelineStage>,
    pub route: String,
}

/// Pipelines are named by their stage list, so composing the same stages
/// twice yields the same id.
pub fn pipeline_id(stages: &[PipelineStage]) -> String {
    let canonical = serde_json::to_vec(stages).expect("stages serialize");
    format!("pl-{}", &compute_digest(&canonical).as_str()[..16])
}

pub fn pipeline_route(pipeline_id: &str) -> String {
    format!("/pipelines/{pipeline_id}/predict")
}

impl ServiceManager {
    pub fn compose_pipeline(&self, stages: Vec<PipelineStage>) -> Result<PipelineDescriptor, ServingError> {
        if stages.is_empty() {
            return Err(ServingError::EmptyPipeline);
        }
        for (index, stage) in stages.iter().enumerate() {
            let ok = match stage {
                PipelineStage::Model { model_name, version } => {
                    let serving = self.registry().get(model_name, *version).is_ok_and(|m| m.stage == Stage::Serving);
                    let healthy = self.descriptor(model_name, *version).is_some_and(|d| d.status == ServiceStatus::Healthy);
                    serving && healthy
                }
                PipelineStage::Pipeline { pipeline_id } => self.pipelines.lock().unwrap().contains_key(pipeline_id),
            };
            if !ok {
                return Err(ServingError::StageNotServing(index));
            }
        }
        let id = pipeline_id(&stages);
        let descriptor = PipelineDescriptor { route: pipeline_route(&id), pipeline_id: id.clone(), stages };
        self.pipelines.lock().unwrap().insert(id, descriptor.clone());
        Ok(descriptor)
    }

    pub fn pipeline(&self, pipeline_id: &str) -> Option<PipelineDescriptor> {
        self.pipelines.lock().unwrap().get(pipeline_id).cloned()
    }

    pub fn list_pipelines(&self) -> Vec<PipelineDescriptor> {
        self.pipelines.lock().unwrap().values().cloned().collect()
    }

    /// Runs the stages in order and returns the last stage's output bytes.
    pub fn invoke_pipeline(&self, pipeline_id: &str, input: &Value) -> Result<Box<RawValue>, ServingError> {
        let descriptor = self.pipeline(pipeline_id).ok_or_else(|| ServingError::UnknownPipeline(pipeline_id.to_owned()))?;
        let mut current = input.clone();
        let mut last = None;
        for stage in &descriptor.stages {
            let out = match stage {
                PipelineStage::Model { model_name, version } => self.invoke(model_name, *version, &current)?,
                PipelineStage::Pipeline { pipeline_id } => self.invoke_pipeline(pipeline_id, &current)?,
            };
            current = serde_json::from_str(out.get())
                .map_err(|e| ServingError::ProtocolViolation(format!("stage output is not JSON: {e}")))?;
            last = Some(out);
        }
        Ok(last.expect("pipelines are non-empty"))
    }
}
