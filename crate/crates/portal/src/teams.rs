//! Competition teams. A principal belongs to at most one team per
//! competition; a team exists as long as it has a member.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use forge_core::clock::ts;
use forge_core::store::{params, sql, OptionalExtension, StoreError, Transaction};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Team {
    pub team_id: String,
    pub competition_id: String,
    pub members: Vec<String>,
}

/// Team ids become part of model names and URL paths.
pub fn validate_team_id(team_id: &str) -> Result<(), ApiError> {
    let ok = !team_id.is_empty()
        && team_id.len() <= 64
        && team_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(ApiError::new(422, "TEAM_ID_INVALID", format!("team id {team_id:?} must be 1-64 of [A-Za-z0-9_-]")))
    }
}

pub fn team_of(tx: &Transaction<'_>, competition_id: &str, principal_id: &str) -> Result<Option<String>, StoreError> {
    sql(tx
        .query_row(
            "SELECT team_id FROM team_members WHERE competition_id = ?1 AND principal_id = ?2",
            [competition_id, principal_id],
            |r| r.get(0),
        )
        .optional())
}

/// Adds the principal to `team_id`, creating the team if needed. Joining
/// the team one already belongs to is a no-op.
pub fn join(
    tx: &Transaction<'_>,
    competition_id: &str,
    team_id: &str,
    principal_id: &str,
    now: DateTime<Utc>,
) -> Result<Team, ApiError> {
    validate_team_id(team_id)?;
    match team_of(tx, competition_id, principal_id)? {
        Some(existing) if existing == team_id => {}
        Some(existing) => {
            return Err(ApiError::new(
                409,
                "ALREADY_IN_TEAM",
                format!("{principal_id} already belongs to team {existing} in {competition_id}"),
            ))
        }
        None => {
            sql(tx.execute(
                "INSERT INTO team_members (competition_id, team_id, principal_id, joined_at) VALUES (?1, ?2, ?3, ?4)",
                params![competition_id, team_id, principal_id, ts(now)],
            ))?;
        }
    }
    Ok(list(tx, competition_id)?.into_iter().find(|t| t.team_id == team_id).expect("team has the new member"))
}

pub fn list(tx: &Transaction<'_>, competition_id: &str) -> Result<Vec<Team>, StoreError> {
    let mut stmt = sql(tx.prepare(
        "SELECT team_id, principal_id FROM team_members WHERE competition_id = ?1 ORDER BY team_id, joined_at, principal_id",
    ))?;
    let rows: Vec<(String, String)> =
        sql(stmt.query_map([competition_id], |r| Ok((r.get(0)?, r.get(1)?))).and_then(|it| it.collect()))?;
    let mut teams: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (team, member) in rows {
        teams.entry(team).or_default().push(member);
    }
    Ok(teams
        .into_iter()
        .map(|(team_id, members)| Team { team_id, competition_id: competition_id.to_owned(), members })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use forge_core::store::Store;

    #[test]
    fn one_team_per_competition() {
        let store = Store::open_in_memory().unwrap();
        let now = Utc::now();
        store
            .write(|tx| {
                let t = join(tx, "c", "alpha", "p1", now)?;
                assert_eq!(t.members, vec!["p1"]);
                let t = join(tx, "c", "alpha", "p2", now)?;
                assert_eq!(t.members, vec!["p1", "p2"]);
                assert_eq!(join(tx, "c", "alpha", "p1", now)?.members.len(), 2);
                assert_eq!(join(tx, "c", "beta", "p1", now).unwrap_err().code, "ALREADY_IN_TEAM");
                // Another competition is independent.
                join(tx, "d", "beta", "p1", now)?;
                assert_eq!(team_of(tx, "d", "p1")?.as_deref(), Some("beta"));
                assert_eq!(list(tx, "c")?.len(), 1);
                Ok::<_, ApiError>(())
            })
            .unwrap();
    }

    #[test]
    fn team_ids_are_path_safe() {
        for bad in ["", "a/b", "a b", "../x", &"x".repeat(65)] {
            assert!(validate_team_id(bad).is_err(), "{bad}");
        }
        assert!(validate_team_id("Team_1-b").is_ok());
    }
}
