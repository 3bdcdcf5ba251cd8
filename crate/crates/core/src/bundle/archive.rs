use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use super::manifest::{normalize_relative_path, parse_manifest, Manifest, ManifestError};
use crate::digest::{compute_digest, Digest};

pub const MANIFEST_PATH: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("not a ZIP archive: {0}")]
    NotAnArchive(String),
    #[error("manifest.json missing at bundle root")]
    ManifestMissing,
    #[error("invalid manifest: {0}")]
    ManifestInvalid(#[from] ManifestError),
    #[error("bundle is for competition {found:?}, expected {expected:?}")]
    WrongCompetition { expected: String, found: String },
    #[error("bundle has {count} entries, limit is {limit}")]
    FileCountExceeded { count: usize, limit: usize },
    #[error("bundle is {size} bytes, limit is {limit}")]
    BundleTooLarge { size: u64, limit: u64 },
    #[error("archive entry escapes the bundle root: {0:?}")]
    PathEscape(String),
    #[error("model file {0:?} not present in bundle")]
    ModelFileMissing(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Size and count ceilings applied to incoming archives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleLimits {
    pub max_bundle_bytes: u64,
    pub max_files: usize,
    /// Ceiling on the sum of decompressed entry sizes.
    pub max_unpacked_bytes: u64,
}

impl Default for BundleLimits {
    fn default() -> Self {
        Self {
            max_bundle_bytes: 512 * 1024 * 1024,
            max_files: 10_000,
            max_unpacked_bytes: 2 * 1024 * 1024 * 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleFile {
    pub bytes: Vec<u8>,
    pub executable: bool,
}

/// The decoded files of a bundle, keyed by relative path.
#[derive(Debug, Clone)]
pub struct BundleContents {
    pub manifest: Manifest,
    pub files: BTreeMap<String, BundleFile>,
    pub digest: Digest,
    pub byte_size: u64,
}

/// An accepted submission archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionBundle {
    pub bundle_id: String,
    pub blob_digest: Digest,
    pub manifest: Manifest,
    pub byte_size: u64,
    pub submitted_at: DateTime<Utc>,
    pub team_id: String,
}

impl<'de> Deserialize<'de> for Manifest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        parse_manifest(&value.to_string()).map_err(serde::de::Error::custom)
    }
}

impl BundleContents {
    /// Opens and checks an archive without tying it to a competition.
    pub fn open(blob: &[u8], limits: &BundleLimits) -> Result<Self, BundleError> {
        let byte_size = blob.len() as u64;
        if byte_size > limits.max_bundle_bytes {
            return Err(BundleError::BundleTooLarge { size: byte_size, limit: limits.max_bundle_bytes });
        }
        let mut archive = ZipArchive::new(Cursor::new(blob))
            .map_err(|e| BundleError::NotAnArchive(e.to_string()))?;
        if archive.len() > limits.max_files {
            return Err(BundleError::FileCountExceeded { count: archive.len(), limit: limits.max_files });
        }

        let mut files = BTreeMap::new();
        let mut unpacked = 0u64;
        for i in 0..archive.len() {
            let mut entry = archive
                .by_index(i)
                .map_err(|e| BundleError::NotAnArchive(e.to_string()))?;
            let raw_name = entry
                .name()
                .map_err(|e| BundleError::NotAnArchive(e.to_string()))?
                .into_owned();
            let name = normalize_relative_path(&raw_name)
                .map_err(|_| BundleError::PathEscape(raw_name.clone()))?;
            if entry.is_symlink() {
                return Err(BundleError::PathEscape(raw_name));
            }
            if entry.is_dir() {
                continue;
            }
            let executable = entry.unix_mode().is_some_and(|m| m & 0o111 != 0);
            let mut bytes = Vec::new();
            let budget = limits.max_unpacked_bytes - unpacked;
            (&mut entry)
                .take(budget + 1)
                .read_to_end(&mut bytes)
                .map_err(|e| BundleError::NotAnArchive(e.to_string()))?;
            unpacked += bytes.len() as u64;
            if unpacked > limits.max_unpacked_bytes {
                return Err(BundleError::BundleTooLarge { size: unpacked, limit: limits.max_unpacked_bytes });
            }
            if files.insert(name.clone(), BundleFile { bytes, executable }).is_some() {
                return Err(BundleError::NotAnArchive(format!("duplicate entry {name:?}")));
            }
        }

        let manifest_bytes = &files.get(MANIFEST_PATH).ok_or(BundleError::ManifestMissing)?.bytes;
        let text = std::str::from_utf8(manifest_bytes)
            .map_err(|_| ManifestError::Malformed("manifest.json is not UTF-8".into()))?;
        let manifest = parse_manifest(text)?;
        check_model_files(&manifest, &files)?;

        Ok(Self { manifest, files, digest: compute_digest(blob), byte_size })
    }

    /// Writes every file below `root`, which must already exist.
    pub fn extract_to(&self, root: &Path) -> Result<(), BundleError> {
        for (name, file) in &self.files {
            // Names were normalized in `open`, re-check before touching disk.
            let name = normalize_relative_path(name).map_err(|_| BundleError::PathEscape(name.clone()))?;
            let dest = root.join(&name);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&dest, &file.bytes)?;
            let mode = if file.executable { 0o755 } else { 0o644 };
            fs::set_permissions(&dest, fs::Permissions::from_mode(mode))?;
        }
        Ok(())
    }

    pub fn total_file_count(&self) -> usize {
        self.files.len()
    }
}

fn check_model_files(manifest: &Manifest, files: &BTreeMap<String, BundleFile>) -> Result<(), BundleError> {
    for path in &manifest.model_files {
        let dir_prefix = format!("{path}/");
        let present = files.contains_key(path)
            || files.range(dir_prefix.clone()..).next().is_some_and(|(k, _)| k.starts_with(&dir_prefix));
        if !present {
            return Err(BundleError::ModelFileMissing(path.clone()));
        }
    }
    Ok(())
}

/// Checks `blob` against the template contract for `competition_id`.
pub fn check_bundle(
    blob: &[u8],
    competition_id: &str,
    limits: &BundleLimits,
) -> Result<BundleContents, BundleError> {
    let contents = BundleContents::open(blob, limits)?;
    if contents.manifest.competition_id != competition_id {
        return Err(BundleError::WrongCompetition {
            expected: competition_id.to_owned(),
            found: contents.manifest.competition_id.clone(),
        });
    }
    Ok(contents)
}

/// Validates a submission and stamps it with a fresh id and the current time.
pub fn validate_bundle(
    blob: &[u8],
    competition_id: &str,
    limits: &BundleLimits,
) -> Result<SubmissionBundle, BundleError> {
    let contents = check_bundle(blob, competition_id, limits)?;
    Ok(SubmissionBundle {
        bundle_id: uuid::Uuid::new_v4().to_string(),
        blob_digest: contents.digest,
        team_id: contents.manifest.team_id.clone(),
        manifest: contents.manifest,
        byte_size: contents.byte_size,
        submitted_at: Utc::now(),
    })
}

/// Packs in-memory files into a deterministic archive: entries sorted by
/// path, timestamps fixed at the ZIP epoch, modes 0644/0755.
pub fn pack_files(files: &BTreeMap<String, BundleFile>) -> Result<Vec<u8>, BundleError> {
    let manifest_bytes = &files.get(MANIFEST_PATH).ok_or(BundleError::ManifestMissing)?.bytes;
    let text = std::str::from_utf8(manifest_bytes)
        .map_err(|_| ManifestError::Malformed("manifest.json is not UTF-8".into()))?;
    let manifest = parse_manifest(text)?;
    check_model_files(&manifest, files)?;

    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    for (name, file) in files {
        let name = normalize_relative_path(name).map_err(|_| BundleError::PathEscape(name.clone()))?;
        let options = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Deflated)
            .last_modified_time(zip::DateTime::default())
            .unix_permissions(if file.executable { 0o755 } else { 0o644 });
        zip.start_file(name, options).map_err(zip_io)?;
        zip.write_all(&file.bytes)?;
    }
    Ok(zip.finish().map_err(zip_io)?.into_inner())
}

/// Packs a directory tree that contains `manifest.json` at its root.
pub fn pack_bundle(dir: &Path) -> Result<Vec<u8>, BundleError> {
    if !dir.join(MANIFEST_PATH).is_file() {
        return Err(BundleError::ManifestMissing);
    }
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files)?;
    pack_files(&files)
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, BundleFile>) -> Result<(), BundleError> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let meta = fs::symlink_metadata(&path)?;
        let rel = path
            .strip_prefix(root)
            .expect("walk stays below root")
            .to_string_lossy()
            .replace(std::path::MAIN_SEPARATOR, "/");
        if meta.file_type().is_symlink() {
            return Err(BundleError::PathEscape(rel));
        }
        if meta.is_dir() {
            collect(root, &path, out)?;
        } else if meta.is_file() {
            let executable = meta.permissions().mode() & 0o111 != 0;
            out.insert(rel, BundleFile { bytes: fs::read(&path)?, executable });
        }
    }
    Ok(())
}

fn zip_io(e: zip::result::ZipError) -> BundleError {
    BundleError::Io(std::io::Error::other(e))
}
