//! Principals and bearer tokens. Only the SHA-256 of a token is stored.

use std::fmt;

use chrono::{DateTime, Utc};
use forge_core::clock::ts;
use forge_core::digest::{compute_digest, Digest};
use forge_core::store::{params, sql, OptionalExtension, StoreError, Transaction};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Organizer,
    Participant,
    ProductTeam,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Organizer, Role::Participant, Role::ProductTeam];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Organizer => "organizer",
            Role::Participant => "participant",
            Role::ProductTeam => "product_team",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub principal_id: String,
    pub display_name: String,
    pub role: Role,
    #[serde(skip_serializing)]
    pub token_hash: Digest,
}

impl Principal {
    /// The actor used by the admin CLI, which runs with direct access to
    /// the data directory.
    pub fn admin() -> Self {
        Principal {
            principal_id: "admin".into(),
            display_name: "admin cli".into(),
            role: Role::Organizer,
            token_hash: compute_digest(b""),
        }
    }

    pub fn require(&self, allowed: &[Role]) -> Result<(), ApiError> {
        if allowed.contains(&self.role) {
            Ok(())
        } else {
            let names: Vec<_> = allowed.iter().map(|r| r.as_str()).collect();
            Err(ApiError::forbidden(format!("role {} may not do this; requires {}", self.role, names.join(" or "))))
        }
    }
}

pub fn hash_token(token: &str) -> Digest {
    compute_digest(token.as_bytes())
}

/// A fresh random token: `fgt_` followed by 64 hex characters.
pub fn new_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    format!("fgt_{}", hex::encode(bytes))
}

pub fn insert_principal(
    tx: &Transaction<'_>,
    display_name: &str,
    role: Role,
    token: &str,
    now: DateTime<Utc>,
) -> Result<Principal, StoreError> {
    let n: i64 = sql(tx.query_row("SELECT COUNT(*) FROM principals", [], |r| r.get(0)))?;
    let principal = Principal {
        principal_id: format!("prn-{:06}", n + 1),
        display_name: display_name.to_owned(),
        role,
        token_hash: hash_token(token),
    };
    sql(tx.execute(
        "INSERT INTO principals (principal_id, display_name, role, token_hash, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
        params![principal.principal_id, principal.display_name, role.as_str(), principal.token_hash.as_str(), ts(now)],
    ))?;
    Ok(principal)
}

pub fn principal_by_token(tx: &Transaction<'_>, token: &str) -> Result<Option<Principal>, StoreError> {
    let hash = hash_token(token);
    let row: Option<(String, String, String)> = sql(tx
        .query_row(
            "SELECT principal_id, display_name, role FROM principals WHERE token_hash = ?1",
            [hash.as_str()],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
        )
        .optional())?;
    row.map(|(principal_id, display_name, role)| {
        let role = Role::parse(&role).ok_or_else(|| StoreError::Corrupt(format!("role {role}")))?;
        Ok(Principal { principal_id, display_name, role, token_hash: hash.clone() })
    })
    .transpose()
}
