//! Competition definitions, phase windows, quotas, and rankings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Duration, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

use crate::eval::{EvalStatus, EvaluationRecord, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Maximize => Direction::Minimize,
            Direction::Minimize => Direction::Maximize,
        }
    }

    /// `Less` when `a` is the better score.
    pub fn compare(self, a: f64, b: f64) -> Ordering {
        let natural = a.partial_cmp(&b).expect("scores are finite");
        match self {
            Direction::Maximize => natural.reverse(),
            Direction::Minimize => natural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub phase_id: String,
    pub opens_at: DateTime<Utc>,
    pub closes_at: DateTime<Utc>,
}

fn default_quota() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompetitionSpec {
    pub competition_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub primary_metric: Metric,
    pub direction: Direction,
    #[serde(default)]
    pub secondary_metrics: Vec<Metric>,
    pub phases: Vec<Phase>,
    #[serde(default = "default_quota")]
    pub daily_quota: u32,
    pub hidden_dataset: String,
    #[serde(default)]
    pub public_dataset: Option<String>,
    #[serde(default)]
    pub reward_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid competition spec: {0}")]
pub struct SpecError(pub String);

impl CompetitionSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let err = |m: &str| Err(SpecError(m.to_owned()));
        if self.competition_id.is_empty() || self.competition_id.contains('/') {
            return err("competition_id must be non-empty and contain no '/'");
        }
        if self.daily_quota < 1 {
            return err("daily_quota must be >= 1");
        }
        if self.hidden_dataset.is_empty() {
            return err("hidden_dataset is required");
        }
        let mut ids = HashSet::new();
        for (i, phase) in self.phases.iter().enumerate() {
            if phase.opens_at >= phase.closes_at {
                return Err(SpecError(format!("phase {:?}: opens_at must be before closes_at", phase.phase_id)));
            }
            if !ids.insert(&phase.phase_id) {
                return Err(SpecError(format!("duplicate phase id {:?}", phase.phase_id)));
            }
            if i > 0 && self.phases[i - 1].closes_at > phase.opens_at {
                return Err(SpecError(format!("phase {:?} overlaps or precedes its predecessor", phase.phase_id)));
            }
        }
        Ok(())
    }

    /// Primary metric first, then secondaries without duplicates.
    pub fn metrics(&self) -> Vec<Metric> {
        let mut out = vec![self.primary_metric];
        for m in &self.secondary_metrics {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }
}

/// The phase whose half-open window `[opens_at, closes_at)` contains `now`.
pub fn phase_at(spec: &CompetitionSpec, now: DateTime<Utc>) -> Option<&Phase> {
    spec.phases.iter().find(|p| p.opens_at <= now && now < p.closes_at)
}

/// Start and end of the UTC calendar day containing `now`.
pub fn utc_day(now: DateTime<Utc>) -> (DateTime<Utc>, DateTime<Utc>) {
    let start = now.date_naive().and_time(NaiveTime::MIN).and_utc();
    (start, start + Duration::days(1))
}

pub fn submissions_remaining(daily_quota: u32, used_today: u64) -> u32 {
    u64::from(daily_quota).saturating_sub(used_today) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: u32,
    pub team_id: String,
    pub best_score: f64,
    pub best_eval_id: String,
    pub submission_count: u32,
    pub best_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeaderboardError {
    #[error("succeeded evaluation {0} lacks the primary metric")]
    MetricMissing(String),
    #[error("evaluation {0} has a non-finite primary metric")]
    NonFiniteScore(String),
    #[error("evaluation {0} succeeded without a finish time")]
    MissingFinishTime(String),
}

struct Best<'a> {
    score: f64,
    at: DateTime<Utc>,
    eval_id: &'a str,
}

/// Ranks teams by their best succeeded evaluation on the hidden dataset.
///
/// Equal best scores share a rank and the next rank skips by the size of
/// the tie ("1224"). Within a team, a tie goes to the earliest finish; rows
/// are ordered by rank, then `best_at`, then team id.
pub fn compute_leaderboard(
    records: &[EvaluationRecord],
    spec: &CompetitionSpec,
) -> Result<Vec<LeaderboardEntry>, LeaderboardError> {
    let metric = spec.primary_metric.id();
    let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
    let mut best: BTreeMap<&str, Best<'_>> = BTreeMap::new();

    for r in records.iter().filter(|r| r.dataset_id == spec.hidden_dataset && r.status.is_terminal()) {
        *counts.entry(&r.team_id).or_default() += 1;
        if r.status != EvalStatus::Succeeded {
            continue;
        }
        let score = *r.metrics.get(metric).ok_or_else(|| LeaderboardError::MetricMissing(r.eval_id.clone()))?;
        if !score.is_finite() {
            return Err(LeaderboardError::NonFiniteScore(r.eval_id.clone()));
        }
        let at = r.finished_at.ok_or_else(|| LeaderboardError::MissingFinishTime(r.eval_id.clone()))?;
        let candidate = Best { score, at, eval_id: &r.eval_id };
        match best.get(r.team_id.as_str()) {
            Some(cur) => {
                let better = spec
                    .direction
                    .compare(candidate.score, cur.score)
                    .then(candidate.at.cmp(&cur.at))
                    .then(candidate.eval_id.cmp(cur.eval_id))
                    == Ordering::Less;
                if better {
                    best.insert(&r.team_id, candidate);
                }
            }
            None => {
                best.insert(&r.team_id, candidate);
            }
        }
    }

    let mut rows: Vec<(&str, Best<'_>)> = best.into_iter().collect();
    rows.sort_by(|(ta, a), (tb, b)| {
        spec.direction.compare(a.score, b.score).then(a.at.cmp(&b.at)).then(ta.cmp(tb))
    });

    let mut entries = Vec::with_capacity(rows.len());
    let mut rank = 0u32;
    let mut prev: Option<f64> = None;
    for (i, (team, b)) in rows.into_iter().enumerate() {
        if prev != Some(b.score) {
            rank = i as u32 + 1;
            prev = Some(b.score);
        }
        entries.push(LeaderboardEntry {
            rank,
            team_id: team.to_owned(),
            best_score: b.score,
            best_eval_id: b.eval_id.to_owned(),
            submission_count: counts[team],
            best_at: b.at,
        });
    }
    Ok(entries)
}
