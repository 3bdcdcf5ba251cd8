use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    PublicTrain,
    HiddenEval,
    Proprietary,
}

impl Visibility {
    pub fn as_str(self) -> &'static str {
        match self {
            Visibility::PublicTrain => "public_train",
            Visibility::HiddenEval => "hidden_eval",
            Visibility::Proprietary => "proprietary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Visibility::PublicTrain, Visibility::HiddenEval, Visibility::Proprietary]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub dataset_id: String,
    pub inputs_path: PathBuf,
    pub labels_path: PathBuf,
    pub visibility: Visibility,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{path}: duplicate id {id:?}")]
    DuplicateId { path: String, id: String },
    #[error("inputs and labels have different id sets")]
    IdSetMismatch,
    #[error("dataset has no records")]
    Empty,
}

/// A loaded dataset: inputs in file order, labels keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<(String, Value)>,
    pub labels: BTreeMap<String, Value>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn read_ndjson(path: &Path, field: &str) -> Result<Vec<(String, Value)>, DatasetError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| DatasetError::Parse { path: display.clone(), line: idx + 1, reason };
        let mut obj = match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(o)) => o,
            Ok(_) => return Err(parse_err("expected a JSON object".into())),
            Err(e) => return Err(parse_err(e.to_string())),
        };
        let id = match obj.remove("id") {
            Some(Value::String(s)) => s,
            _ => return Err(parse_err("\"id\" must be a string".into())),
        };
        let value = obj.remove(field).ok_or_else(|| parse_err(format!("missing {field:?}")))?;
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { path: display, id });
        }
        out.push((id, value));
    }
    Ok(out)
}

impl DatasetRef {
    pub fn load(&self) -> Result<Dataset, DatasetError> {
        let inputs = read_ndjson(&self.inputs_path, "input")?;
        let labels: BTreeMap<_, _> = read_ndjson(&self.labels_path, "label")?.into_iter().collect();
        if inputs.is_empty() {
            return Err(DatasetError::Empty);
        }
        if inputs.len() != labels.len() || inputs.iter().any(|(id, _)| !labels.contains_key(id)) {
            return Err(DatasetError::IdSetMismatch);
        }
        Ok(Dataset { inputs, labels })
    }
}

/// Splits a combined NDJSON file of `{"id", "input", "label"}` objects into
/// `inputs.ndjson` and `labels.ndjson` under `out_dir`.
pub fn split_combined(combined: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf), DatasetError> {
    let inputs = read_ndjson(combined, "input")?;
    let labels = read_ndjson(combined, "label")?;
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, field: &str, rows: &[(String, Value)]| -> Result<PathBuf, DatasetError> {
        let path = out_dir.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        for (id, v) in rows {
            let line = serde_json::json!({ "id": id, field: v });
            writeln!(f, "{line}").map_err(io_err(&path))?;
        }
        Ok(path)
    };
    Ok((write("inputs.ndjson", "input", &inputs)?, write("labels.ndjson", "label", &labels)?))
}
