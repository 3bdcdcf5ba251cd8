//! Data directory layout and the optional `forge.yaml` inside it.

use std::path::{Path, PathBuf};

use forge_core::bundle::BundleLimits;
use forge_core::eval::SandboxPolicy;
use forge_core::serving::DEFAULT_CAPACITY;
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "forge.yaml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub bundle_limits: BundleLimits,
    pub sandbox: SandboxPolicy,
    pub serving_capacity: usize,
    pub probe_interval_s: u64,
    /// Evaluation workers started by `forge serve`.
    pub workers: usize,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            bundle_limits: BundleLimits::default(),
            sandbox: SandboxPolicy::default(),
            serving_capacity: DEFAULT_CAPACITY,
            probe_interval_s: 30,
            workers: 1,
        }
    }
}

impl PlatformConfig {
    /// Reads `forge.yaml` from the data directory, or defaults if absent.
    pub fn load(data_dir: &Path) -> anyhow::Result<Self> {
        let path = data_dir.join(CONFIG_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path)?;
        let config: Self = serde_yaml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        config.sandbox.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(config)
    }
}

/// Paths below the data directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn database(&self) -> PathBuf {
        self.root.join("forge.db")
    }

    pub fn blobs(&self) -> PathBuf {
        self.root.join("blobs")
    }

    pub fn scratch(&self) -> PathBuf {
        self.root.join("scratch")
    }

    pub fn services(&self) -> PathBuf {
        self.root.join("services")
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    /// An organizer-supplied ruleset; the built-in one is used if absent.
    pub fn gate_rules(&self) -> PathBuf {
        self.root.join("gate").join("rules.yaml")
    }
}
