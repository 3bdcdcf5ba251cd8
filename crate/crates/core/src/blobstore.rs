//! Content-addressed blob storage under `<root>/<d0d1>/<digest>`.
//!
//! Writes go to a temporary file in the target directory and are renamed
//! into place, so a blob is either fully present or absent. Reads recompute
//! the digest and refuse bytes that no longer match their name.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::digest::{compute_digest, Digest};

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("unknown digest {0}")]
    UnknownDigest(Digest),
    #[error("blob {0} is corrupt: content hashes to {1}")]
    Corrupt(Digest, Digest),
    #[error("blob store io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobStoreEntry {
    pub digest: Digest,
    pub byte_size: u64,
    pub stored_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BlobError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, digest: &Digest) -> PathBuf {
        self.root.join(digest.prefix()).join(digest.as_str())
    }

    /// Stores `bytes`; storing the same content twice keeps one copy.
    pub fn put(&self, bytes: &[u8]) -> Result<Digest, BlobError> {
        let digest = compute_digest(bytes);
        let dest = self.path_of(&digest);
        if dest.is_file() {
            return Ok(digest);
        }
        let dir = dest.parent().expect("blob path has a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        // A concurrent writer of the same content may win the rename; the
        // bytes are identical so either result is correct.
        tmp.persist(&dest).map_err(|e| BlobError::Io(e.error))?;
        Ok(digest)
    }

    /// Returns the bytes for `digest`, verifying them on the way out.
    pub fn get(&self, digest: &Digest) -> Result<Vec<u8>, BlobError> {
        let bytes = match fs::read(self.path_of(digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(BlobError::UnknownDigest(digest.clone())),
            Err(e) => return Err(e.into()),
        };
        let actual = compute_digest(&bytes);
        if &actual != digest {
            return Err(BlobError::Corrupt(digest.clone(), actual));
        }
        Ok(bytes)
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.path_of(digest).is_file()
    }

    pub fn entry(&self, digest: &Digest) -> Result<BlobStoreEntry, BlobError> {
        let meta = match fs::metadata(self.path_of(digest)) {
            Ok(m) => m,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(BlobError::UnknownDigest(digest.clone())),
            Err(e) => return Err(e.into()),
        };
        let stored_at = meta.modified().map(DateTime::<Utc>::from)?;
        Ok(BlobStoreEntry { digest: digest.clone(), byte_size: meta.len(), stored_at })
    }
}
