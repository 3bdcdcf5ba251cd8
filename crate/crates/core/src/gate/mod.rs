//! Static analysis that gates materialization of harvested models.

mod rules;
mod scan;

pub use rules::{
    default_rules, default_rules_yaml, default_ruleset, ruleset_digest, GateError, GateRule, RuleKind,
    Ruleset, Severity, BINARY_SKIP_RULE, DEFAULT_RULES_PATH,
};
pub use scan::{is_binary, scan, Finding, GateReport, Verdict, BINARY_SNIFF_BYTES, BUNDLE_PATH, MAX_EXCERPT_CHARS};
