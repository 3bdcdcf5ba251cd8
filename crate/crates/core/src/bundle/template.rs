//! The starter kit attached to every competition.

use std::collections::BTreeMap;

use super::{pack_files, BundleError, BundleFile, MANIFEST_PATH};

const PREDICT_PY: &str = include_str!("../../template/predict.py");
const README_MD: &str = include_str!("../../template/README.md");

pub const PLACEHOLDER_TEAM: &str = "your-team";

pub fn starter_files(competition_id: &str) -> BTreeMap<String, BundleFile> {
    let manifest = serde_json::json!({
        "schema_version": 1,
        "competition_id": competition_id,
        "team_id": PLACEHOLDER_TEAM,
        "entrypoints": {"predict": ["python3", "predict.py"]},
        "model_files": [],
        "declared_dependencies": [],
        "runtime_hint": "python3",
    });
    let mut files = BTreeMap::new();
    files.insert(
        MANIFEST_PATH.to_owned(),
        BundleFile { bytes: serde_json::to_vec_pretty(&manifest).expect("static json"), executable: false },
    );
    files.insert("predict.py".into(), BundleFile { bytes: PREDICT_PY.into(), executable: true });
    files.insert("README.md".into(), BundleFile { bytes: README_MD.into(), executable: false });
    files
}

/// Deterministic starter archive for `competition_id`.
pub fn starter_archive(competition_id: &str) -> Result<Vec<u8>, BundleError> {
    pack_files(&starter_files(competition_id))
}
