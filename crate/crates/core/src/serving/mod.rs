//! Turning serving-stage registry versions into invocable services.

pub mod apidoc;
pub mod pipeline;
pub mod service;

pub use apidoc::{generate_api_doc, predict_route, validate_openapi, ApiDocument, IoSchema, SchemaInvalid};
pub use pipeline::{pipeline_id, pipeline_route, PipelineDescriptor, PipelineStage};
pub use service::{
    DashboardRow, ServiceDescriptor, ServiceManager, ServiceStatus, ServingConfig, ServingError, DEFAULT_CAPACITY,
    DEFAULT_PROBE_INTERVAL,
};
