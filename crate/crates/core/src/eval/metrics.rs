//! Scoring of predictions against labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Accuracy, Metric::MacroF1, Metric::Rmse];

    pub fn id(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::Rmse => "rmse",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Metric {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| ScoreError::UnknownMetric(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("prediction ids do not match label ids")]
    IdSetMismatch,
    #[error("non-numeric value for id {0:?}")]
    NonNumeric(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("nothing to score")]
    Empty,
}

/// Canonical class key: numbers compare by value (1 == 1.0), objects by
/// sorted keys.
pub fn class_key(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) => format!("{f:?}"),
            None => n.to_string(),
        },
        Value::Array(items) => format!("[{}]", items.iter().map(class_key).collect::<Vec<_>>().join(",")),
        Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let body: Vec<_> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), class_key(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        other => other.to_string(),
    }
}

pub fn score_by_id(
    predictions: &BTreeMap<String, Value>,
    labels: &BTreeMap<String, Value>,
    metric_id: &str,
) -> Result<f64, ScoreError> {
    score(predictions, labels, metric_id.parse()?)
}

pub fn score(
    predictions: &BTreeMap<String, Value>,
    labels: &BTreeMap<String, Value>,
    metric: Metric,
) -> Result<f64, ScoreError> {
    if predictions.len() != labels.len() || !predictions.keys().eq(labels.keys()) {
        return Err(ScoreError::IdSetMismatch);
    }
    if labels.is_empty() {
        return Err(ScoreError::Empty);
    }
    // Both maps iterate in the same id order.
    let pairs = || predictions.values().zip(labels.values());
    let n = labels.len() as f64;
    match metric {
        Metric::Accuracy => {
            let hits = pairs().filter(|(p, l)| class_key(p) == class_key(l)).count();
            Ok(hits as f64 / n)
        }
        Metric::MacroF1 => {
            let keyed: Vec<(String, String)> = pairs().map(|(p, l)| (class_key(p), class_key(l))).collect();
            let classes: BTreeSet<&str> = keyed.iter().map(|(_, l)| l.as_str()).collect();
            let mut total = 0.0;
            for class in &classes {
                let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
                for (p, l) in &keyed {
                    match (p == class, l == class) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
                let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                if precision + recall > 0.0 {
                    total += 2.0 * precision * recall / (precision + recall);
                }
            }
            Ok(total / classes.len() as f64)
        }
        Metric::Rmse => {
            let mut sum = 0.0;
            for (id, (p, l)) in labels.keys().zip(pairs()) {
                let (Some(p), Some(l)) = (p.as_f64(), l.as_f64()) else {
                    return Err(ScoreError::NonNumeric(id.clone()));
                };
                sum += (p - l) * (p - l);
            }
            Ok((sum / n).sqrt())
        }
    }
}
