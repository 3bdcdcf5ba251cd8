use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unsupported manifest schema_version {0}, expected 1")]
    UnsupportedSchemaVersion(String),
    #[error("missing entrypoint {0:?}")]
    MissingEntrypoint(&'static str),
    #[error("path escapes bundle root: {0:?}")]
    PathEscape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entrypoints {
    pub predict: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<Vec<String>>,
}

/// The template contract declared by `manifest.json` at the bundle root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub schema_version: u64,
    pub competition_id: String,
    pub team_id: String,
    pub entrypoints: Entrypoints,
    pub model_files: Vec<String>,
    pub declared_dependencies: Vec<String>,
    pub runtime_hint: String,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub hyper_parameters: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(rename = "schema_version")]
    _schema_version: serde::de::IgnoredAny,
    competition_id: String,
    team_id: String,
    entrypoints: Entrypoints,
    #[serde(default)]
    model_files: Vec<String>,
    #[serde(default)]
    declared_dependencies: Vec<String>,
    #[serde(default)]
    runtime_hint: String,
    #[serde(default)]
    hyper_parameters: BTreeMap<String, Value>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ManifestError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| ManifestError::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ManifestError::Malformed("top level must be an object".into()))?;

    // Version and entrypoint presence get dedicated errors before the generic
    // field-level checks run.
    match obj.get("schema_version") {
        None => return Err(ManifestError::Malformed("missing field `schema_version`".into())),
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(ManifestError::UnsupportedSchemaVersion(v.to_string())),
    }
    let predict = obj
        .get("entrypoints")
        .and_then(Value::as_object)
        .and_then(|e| e.get("predict"));
    match predict {
        Some(Value::Array(argv)) if !argv.is_empty() => {}
        Some(Value::Array(_)) | None => return Err(ManifestError::MissingEntrypoint("predict")),
        Some(_) => return Err(ManifestError::Malformed("entrypoints.predict must be a list".into())),
    }

    let raw: RawManifest =
        serde_json::from_value(value).map_err(|e| ManifestError::Malformed(e.to_string()))?;

    check_argv("predict", &raw.entrypoints.predict)?;
    if let Some(train) = &raw.entrypoints.train {
        check_argv("train", train)?;
    }
    if raw.competition_id.is_empty() || raw.team_id.is_empty() {
        return Err(ManifestError::Malformed("competition_id and team_id must be non-empty".into()));
    }
    let model_files = raw
        .model_files
        .into_iter()
        .map(|p| normalize_relative_path(&p))
        .collect::<Result<Vec<_>, _>>()?;
    for dep in &raw.declared_dependencies {
        match dep.split_once('@') {
            Some((name, version)) if !name.is_empty() && !version.is_empty() => {}
            _ => {
                return Err(ManifestError::Malformed(format!(
                    "dependency {dep:?} is not of the form name@version"
                )))
            }
        }
    }
    let hyper_parameters = raw
        .hyper_parameters
        .into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            Value::Number(_) | Value::Bool(_) => Ok((k, v.to_string())),
            _ => Err(ManifestError::Malformed(format!(
                "hyper_parameters.{k} must be a scalar"
            ))),
        })
        .collect::<Result<_, _>>()?;

    Ok(Manifest {
        schema_version: SCHEMA_VERSION,
        competition_id: raw.competition_id,
        team_id: raw.team_id,
        entrypoints: raw.entrypoints,
        model_files,
        declared_dependencies: raw.declared_dependencies,
        runtime_hint: raw.runtime_hint,
        hyper_parameters,
    })
}

fn check_argv(name: &str, argv: &[String]) -> Result<(), ManifestError> {
    if argv.iter().any(String::is_empty) {
        return Err(ManifestError::Malformed(format!(
            "entrypoints.{name} contains an empty argument"
        )));
    }
    Ok(())
}

/// Checks that `path` names something strictly inside the bundle root and
/// returns it without a trailing slash.
///
/// Rejects absolute paths, drive prefixes, backslashes, NUL, and any empty,
/// `.` or `..` segment.
pub fn normalize_relative_path(path: &str) -> Result<String, ManifestError> {
    let escape = || ManifestError::PathEscape(path.to_owned());
    let trimmed = path.strip_suffix('/').unwrap_or(path);
    if trimmed.is_empty() || trimmed.starts_with('/') || trimmed.contains(['\\', '\0']) {
        return Err(escape());
    }
    let bytes = trimmed.as_bytes();
    if bytes.len() >= 2 && bytes[1] == b':' && bytes[0].is_ascii_alphabetic() {
        return Err(escape());
    }
    if trimmed.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
        return Err(escape());
    }
    Ok(trimmed.to_owned())
}
