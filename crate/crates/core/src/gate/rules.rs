use std::collections::HashSet;
use std::path::Path;

use globset::{GlobBuilder, GlobMatcher};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::digest::{compute_digest, Digest};

const DEFAULT_RULES_YAML: &str = include_str!("../../gate/default_rules.yaml");

/// Relative location of the ruleset under a platform data directory.
pub const DEFAULT_RULES_PATH: &str = "gate/default_rules.yaml";

/// Reserved id for the per-file note emitted when a binary file is skipped.
pub const BINARY_SKIP_RULE: &str = "BIN-SKIP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warn,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Pattern,
    MaxFileBytes,
    MaxFileCount,
    DependencyAllowlist,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateRule {
    pub rule_id: String,
    pub severity: Severity,
    pub kind: RuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default = "any_file")]
    pub file_glob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowlist: Vec<String>,
}

fn any_file() -> String {
    "**".to_owned()
}

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("rule {0}: {1}")]
    RulesetInvalid(String, String),
    #[error("ruleset file missing: {0}")]
    RulesetFileMissing(String),
    #[error("ruleset file unreadable: {0}")]
    RulesetUnreadable(String),
}

pub(crate) struct CompiledRule {
    pub rule: GateRule,
    pub glob: GlobMatcher,
    pub regex: Option<Regex>,
}

/// A validated, compiled list of rules together with its content digest.
pub struct Ruleset {
    pub(crate) rules: Vec<CompiledRule>,
    digest: Digest,
}

impl std::fmt::Debug for Ruleset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ruleset").field("rules", &self.rules.len()).field("digest", &self.digest).finish()
    }
}

impl Ruleset {
    pub fn new(rules: Vec<GateRule>) -> Result<Self, GateError> {
        let digest = ruleset_digest(&rules);
        let mut seen = HashSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            let invalid = |reason: String| GateError::RulesetInvalid(rule.rule_id.clone(), reason);
            if rule.rule_id.is_empty() {
                return Err(invalid("empty rule_id".into()));
            }
            if rule.rule_id == BINARY_SKIP_RULE {
                return Err(invalid("rule id is reserved".into()));
            }
            if !seen.insert(rule.rule_id.clone()) {
                return Err(invalid("duplicate rule_id".into()));
            }
            let glob = GlobBuilder::new(&rule.file_glob)
                .literal_separator(true)
                .build()
                .map_err(|e| invalid(format!("bad file_glob: {e}")))?
                .compile_matcher();
            let regex = match rule.kind {
                RuleKind::Pattern => {
                    let pattern = rule.pattern.as_deref().ok_or_else(|| invalid("pattern rule without pattern".into()))?;
                    Some(Regex::new(pattern).map_err(|e| invalid(format!("pattern does not compile: {e}")))?)
                }
                RuleKind::MaxFileBytes | RuleKind::MaxFileCount => {
                    match rule.limit {
                        Some(l) if l > 0 => {}
                        _ => return Err(invalid("limit must be > 0".into())),
                    }
                    None
                }
                RuleKind::DependencyAllowlist => None,
            };
            compiled.push(CompiledRule { rule, glob, regex });
        }
        Ok(Self { rules: compiled, digest })
    }

    pub fn from_yaml(text: &str) -> Result<Self, GateError> {
        let rules: Vec<GateRule> =
            serde_yaml::from_str(text).map_err(|e| GateError::RulesetInvalid("<file>".into(), e.to_string()))?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, GateError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => GateError::RulesetFileMissing(path.display().to_string()),
            _ => GateError::RulesetUnreadable(format!("{}: {e}", path.display())),
        })?;
        Self::from_yaml(&text)
    }

    pub fn digest(&self) -> &Digest {
        &self.digest
    }

    pub fn rules(&self) -> impl Iterator<Item = &GateRule> {
        self.rules.iter().map(|c| &c.rule)
    }

    pub fn contains(&self, rule_id: &str) -> bool {
        self.rules.iter().any(|c| c.rule.rule_id == rule_id)
    }
}

/// Digest of the canonical JSON rendering of `rules`.
pub fn ruleset_digest(rules: &[GateRule]) -> Digest {
    compute_digest(&serde_json::to_vec(rules).expect("rules serialize"))
}

/// The packaged default rules.
pub fn default_rules() -> Vec<GateRule> {
    serde_yaml::from_str(DEFAULT_RULES_YAML).expect("packaged ruleset parses")
}

pub fn default_rules_yaml() -> &'static str {
    DEFAULT_RULES_YAML
}

pub fn default_ruleset() -> Ruleset {
    Ruleset::new(default_rules()).expect("packaged ruleset is valid")
}
