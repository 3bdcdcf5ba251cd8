//! OpenAPI 3 documents for served models, plus a structural validator.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::digest::{compute_digest, Digest};

pub const OPENAPI_VERSION: &str = "3.0.3";

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid API schema: {0}")]
pub struct SchemaInvalid(pub String);

/// JSON schemas for a model's input and output values. `components` are
/// merged into `components.schemas` and may be referenced from either side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IoSchema {
    pub input: Value,
    pub output: Value,
    pub components: BTreeMap<String, Value>,
}

impl IoSchema {
    /// Any JSON value in, any JSON value out.
    pub fn any() -> Self {
        Self { input: json!({}), output: json!({}), components: BTreeMap::new() }
    }
}

/// A generated document. Keys serialize in sorted order, so equal documents
/// have equal bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiDocument(Value);

impl ApiDocument {
    pub fn as_value(&self) -> &Value {
        &self.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(&self.0).expect("documents serialize")
    }

    pub fn digest(&self) -> Digest {
        compute_digest(&self.to_bytes())
    }
}

pub fn predict_route(model_name: &str, version: u32) -> String {
    format!("/models/{model_name}/{version}/predict")
}

fn json_body(schema_ref: &str, description: &str) -> Value {
    json!({
        "description": description,
        "content": {"application/json": {"schema": {"$ref": format!("#/components/schemas/{schema_ref}")}}}
    })
}

pub fn generate_api_doc(model_name: &str, version: u32, io: &IoSchema) -> Result<ApiDocument, SchemaInvalid> {
    let mut schemas = Map::new();
    for (name, schema) in &io.components {
        if name.is_empty() || name.contains('/') || name.contains('~') {
            return Err(SchemaInvalid(format!("component name {name:?}")));
        }
        schemas.insert(name.clone(), schema.clone());
    }
    for reserved in ["PredictRequest", "PredictResponse", "Error"] {
        if schemas.contains_key(reserved) {
            return Err(SchemaInvalid(format!("component name {reserved:?} is reserved")));
        }
    }
    schemas.insert(
        "PredictRequest".into(),
        json!({"type": "object", "required": ["input"], "properties": {"input": io.input}}),
    );
    schemas.insert(
        "PredictResponse".into(),
        json!({"type": "object", "required": ["output"], "properties": {"output": io.output}}),
    );
    schemas.insert(
        "Error".into(),
        json!({
            "type": "object",
            "required": ["code", "message"],
            "properties": {"code": {"type": "string"}, "message": {"type": "string"}}
        }),
    );

    let mut request = json_body("PredictRequest", "One record for the model");
    request.as_object_mut().unwrap().insert("required".into(), Value::Bool(true));
    let doc = json!({
        "openapi": OPENAPI_VERSION,
        "info": {"title": model_name, "version": version.to_string()},
        "paths": {
            predict_route(model_name, version): {
                "post": {
                    "operationId": "predict",
                    "summary": format!("Run {model_name} version {version} on one input"),
                    "requestBody": request,
                    "responses": {
                        "200": json_body("PredictResponse", "The model's output, verbatim"),
                        "503": json_body("Error", "The backing process is not healthy"),
                        "504": json_body("Error", "The model did not answer in time")
                    }
                }
            }
        },
        "components": {"schemas": schemas}
    });
    validate_openapi(&doc)?;
    Ok(ApiDocument(doc))
}

const METHODS: [&str; 8] = ["get", "put", "post", "delete", "options", "head", "patch", "trace"];

fn collect_refs<'a>(v: &'a Value, out: &mut Vec<&'a str>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                match (k.as_str(), child) {
                    ("$ref", Value::String(s)) => out.push(s),
                    _ => collect_refs(child, out),
                }
            }
        }
        Value::Array(items) => items.iter().for_each(|c| collect_refs(c, out)),
        _ => {}
    }
}

/// Checks the structural rules every generated document must satisfy:
/// version 3.x, info title and version, non-empty paths with operations that
/// have responses, and every `$ref` resolving inside the document.
pub fn validate_openapi(doc: &Value) -> Result<(), SchemaInvalid> {
    let bad = |s: &str| Err(SchemaInvalid(s.to_owned()));
    match doc.get("openapi").and_then(Value::as_str) {
        Some(v) if v.starts_with("3.") => {}
        _ => return bad("openapi must be a 3.x version string"),
    }
    let info = doc.get("info").and_then(Value::as_object);
    if !info.is_some_and(|i| i.get("title").is_some_and(Value::is_string) && i.get("version").is_some_and(Value::is_string)) {
        return bad("info.title and info.version must be strings");
    }
    let Some(paths) = doc.get("paths").and_then(Value::as_object).filter(|p| !p.is_empty()) else {
        return bad("paths must be a non-empty object");
    };
    for (path, item) in paths {
        if !path.starts_with('/') {
            return Err(SchemaInvalid(format!("path {path:?} must start with '/'")));
        }
        let Some(item) = item.as_object() else {
            return Err(SchemaInvalid(format!("path {path:?} must be an object")));
        };
        let ops: Vec<_> = item.iter().filter(|(k, _)| METHODS.contains(&k.as_str())).collect();
        if ops.is_empty() {
            return Err(SchemaInvalid(format!("path {path:?} has no operations")));
        }
        for (method, op) in ops {
            if !op.get("responses").and_then(Value::as_object).is_some_and(|r| !r.is_empty()) {
                return Err(SchemaInvalid(format!("{method} {path} has no responses")));
            }
        }
    }
    if let Some(c) = doc.get("components") {
        if !c.is_object() {
            return bad("components must be an object");
        }
    }
    let mut refs = Vec::new();
    collect_refs(doc, &mut refs);
    for r in refs {
        let resolved = r.strip_prefix('#').filter(|p| p.is_empty() || p.starts_with('/')).and_then(|p| doc.pointer(p));
        if resolved.is_none() {
            return Err(SchemaInvalid(format!("unresolved reference {r:?}")));
        }
    }
    Ok(())
}
