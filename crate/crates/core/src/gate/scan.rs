use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::rules::{GateError, GateRule, RuleKind, Ruleset, Severity, BINARY_SKIP_RULE};
use crate::bundle::{BundleContents, MANIFEST_PATH};
use crate::digest::Digest;

pub const MAX_EXCERPT_CHARS: usize = 200;
/// A file is binary if a NUL byte appears in this many leading bytes.
pub const BINARY_SNIFF_BYTES: usize = 8 * 1024;
/// Path used for findings about the bundle as a whole.
pub const BUNDLE_PATH: &str = ".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub rule_id: String,
    pub severity: Severity,
    pub path: String,
    #[serde(default)]
    pub line: Option<u64>,
    pub excerpt: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub bundle_id: String,
    pub ruleset_digest: Digest,
    pub findings: Vec<Finding>,
    pub verdict: Verdict,
    pub scanned_at: DateTime<Utc>,
}

impl GateReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

pub fn is_binary(bytes: &[u8]) -> bool {
    bytes[..bytes.len().min(BINARY_SNIFF_BYTES)].contains(&0)
}

fn excerpt(text: &str) -> String {
    text.chars().take(MAX_EXCERPT_CHARS).collect()
}

fn dependency_allowed(dep: &str, allowlist: &[String]) -> bool {
    let (name, version) = dep.split_once('@').unwrap_or((dep, ""));
    allowlist.iter().any(|entry| match entry.split_once('@') {
        _ if entry == "*" => true,
        None => entry == name,
        Some((n, "*")) => n == name,
        Some((n, v)) => n == name && v == version,
    })
}

/// Compiles `rules` and scans `contents` with them.
pub fn scan(
    bundle_id: &str,
    contents: &BundleContents,
    rules: &[GateRule],
    scanned_at: DateTime<Utc>,
) -> Result<GateReport, GateError> {
    Ok(Ruleset::new(rules.to_vec())?.scan(bundle_id, contents, scanned_at))
}

impl Ruleset {
    /// Applies every rule to every file it selects. Findings are ordered by
    /// path, then line, then rule id.
    pub fn scan(&self, bundle_id: &str, contents: &BundleContents, scanned_at: DateTime<Utc>) -> GateReport {
        let mut findings = Vec::new();
        let mut skipped_binaries = BTreeSet::new();

        for compiled in &self.rules {
            let rule = &compiled.rule;
            let finding = |path: &str, line: Option<u64>, text: &str| Finding {
                rule_id: rule.rule_id.clone(),
                severity: rule.severity,
                path: path.to_owned(),
                line,
                excerpt: excerpt(text),
            };
            let selected = contents.files.iter().filter(|(path, _)| compiled.glob.is_match(path.as_str()));
            match rule.kind {
                RuleKind::Pattern => {
                    let regex = compiled.regex.as_ref().expect("pattern rules carry a regex");
                    for (path, file) in selected {
                        if is_binary(&file.bytes) {
                            skipped_binaries.insert(path.clone());
                            continue;
                        }
                        let text = String::from_utf8_lossy(&file.bytes);
                        for (idx, line) in text.split('\n').enumerate() {
                            let line = line.strip_suffix('\r').unwrap_or(line);
                            if regex.is_match(line) {
                                findings.push(finding(path, Some(idx as u64 + 1), line.trim()));
                            }
                        }
                    }
                }
                RuleKind::MaxFileBytes => {
                    let limit = rule.limit.expect("validated");
                    for (path, file) in selected {
                        let size = file.bytes.len() as u64;
                        if size > limit {
                            findings.push(finding(path, None, &format!("{size} bytes exceeds limit of {limit}")));
                        }
                    }
                }
                RuleKind::MaxFileCount => {
                    let limit = rule.limit.expect("validated");
                    let count = selected.count() as u64;
                    if count > limit {
                        findings.push(finding(BUNDLE_PATH, None, &format!("{count} files exceeds limit of {limit}")));
                    }
                }
                RuleKind::DependencyAllowlist => {
                    for dep in &contents.manifest.declared_dependencies {
                        if !dependency_allowed(dep, &rule.allowlist) {
                            findings.push(finding(MANIFEST_PATH, None, &format!("dependency {dep} not in allowlist")));
                        }
                    }
                }
            }
        }

        findings.extend(skipped_binaries.into_iter().map(|path| Finding {
            rule_id: BINARY_SKIP_RULE.to_owned(),
            severity: Severity::Info,
            path,
            line: None,
            excerpt: "binary file skipped by pattern rules".to_owned(),
        }));
        findings.sort_by(|a, b| (&a.path, a.line, &a.rule_id).cmp(&(&b.path, b.line, &b.rule_id)));

        let verdict = if findings.iter().any(|f| f.severity == Severity::Block) {
            Verdict::Fail
        } else {
            Verdict::Pass
        };
        GateReport {
            bundle_id: bundle_id.to_owned(),
            ruleset_digest: self.digest().clone(),
            findings,
            verdict,
            scanned_at,
        }
    }
}
