//! Capability tokens whose state is derived from the trust ledger.
//!
//! Grants and revocations only ever enter through ledger entries, so the
//! token book is exactly the fold of [`TokenBook::apply`] over the chain.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MechanismError;
use crate::crypto;
use crate::predicate::{glob_match, LabelPattern};
use crate::trust::{LedgerBlock, LedgerEntry, TrustLedger};
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorizationToken {
    pub token_id: String,
    pub subject: String,
    pub resource: String,
    pub operations: BTreeSet<String>,
    pub context_constraint: String,
    pub expiry: Millis,
    pub status: TokenStatus,
}

impl AuthorizationToken {
    pub fn is_revoked(&self) -> bool {
        self.status == TokenStatus::Revoked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    Revoked,
    Expired,
    Context,
    Operation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum TokenDecision {
    Allow,
    Deny(DenyReason),
}

impl TokenDecision {
    pub fn allowed(&self) -> bool {
        matches!(self, TokenDecision::Allow)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenBook {
    tokens: BTreeMap<String, AuthorizationToken>,
}

impl TokenBook {
    /// Folds one ledger entry into the book; non-token entries are ignored.
    pub fn apply(&mut self, entry: &LedgerEntry) {
        match entry {
            LedgerEntry::TokenGrant {
                token_id,
                subject,
                resource,
                operations,
                constraint,
                expiry,
            } => {
                self.tokens.entry(token_id.clone()).or_insert_with(|| AuthorizationToken {
                    token_id: token_id.clone(),
                    subject: subject.clone(),
                    resource: resource.clone(),
                    operations: operations.iter().cloned().collect(),
                    context_constraint: constraint.clone(),
                    expiry: *expiry,
                    status: TokenStatus::Active,
                });
            }
            LedgerEntry::TokenRevoke { token_id } => {
                if let Some(t) = self.tokens.get_mut(token_id) {
                    t.status = TokenStatus::Revoked;
                }
            }
            _ => {}
        }
    }

    /// Rebuilds token state from a block sequence.
    pub fn replay(blocks: &[LedgerBlock]) -> Self {
        let mut book = Self::default();
        for b in blocks {
            book.apply(&b.entry);
        }
        book
    }

    pub fn get(&self, token_id: &str) -> Option<&AuthorizationToken> {
        self.tokens.get(token_id)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &AuthorizationToken> {
        self.tokens.values()
    }

    pub fn check(
        &self,
        token_id: &str,
        label: &str,
        operation: &str,
        now: Millis,
    ) -> Result<TokenDecision, MechanismError> {
        let t = self
            .get(token_id)
            .ok_or_else(|| MechanismError::UnknownToken(token_id.to_string()))?;
        Ok(decide(t, label, operation, now))
    }
}

/// The allow predicate; deny reasons are reported in a fixed order.
pub fn decide(t: &AuthorizationToken, label: &str, operation: &str, now: Millis) -> TokenDecision {
    if t.is_revoked() {
        TokenDecision::Deny(DenyReason::Revoked)
    } else if now >= t.expiry {
        TokenDecision::Deny(DenyReason::Expired)
    } else if !glob_match(&t.context_constraint, label) {
        TokenDecision::Deny(DenyReason::Context)
    } else if !t.operations.contains(operation) {
        TokenDecision::Deny(DenyReason::Operation)
    } else {
        TokenDecision::Allow
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    #[serde(default)]
    pub token_id: Option<String>,
    pub subject: String,
    pub resource: String,
    pub operations: BTreeSet<String>,
    pub constraint: LabelPattern,
    pub expiry: Millis,
}

/// Records a grant on the ledger. Without an explicit id one is derived from
/// the request and the chain position, so ids are reproducible.
pub fn grant_token(
    ledger: &mut TrustLedger,
    req: &TokenRequest,
    now: Millis,
) -> Result<AuthorizationToken, MechanismError> {
    let token_id = req.token_id.clone().unwrap_or_else(|| {
        let d = crypto::sha256_parts(&[
            b"caspaas.token.v1",
            req.subject.as_bytes(),
            req.resource.as_bytes(),
            &(ledger.blocks().len() as u64).to_be_bytes(),
            &now.to_be_bytes(),
        ]);
        let hex: String = d[..8].iter().map(|b| format!("{b:02x}")).collect();
        format!("tok-{hex}")
    });
    ledger.append(
        LedgerEntry::TokenGrant {
            token_id: token_id.clone(),
            subject: req.subject.clone(),
            resource: req.resource.clone(),
            operations: req.operations.iter().cloned().collect(),
            constraint: req.constraint.as_str().to_string(),
            expiry: req.expiry,
        },
        now,
    )?;
    Ok(ledger.tokens().get(&token_id).expect("just granted").clone())
}

pub fn revoke_token(ledger: &mut TrustLedger, token_id: &str, now: Millis) -> Result<(), MechanismError> {
    if ledger.tokens().get(token_id).is_none() {
        return Err(MechanismError::UnknownToken(token_id.to_string()));
    }
    ledger.append(
        LedgerEntry::TokenRevoke {
            token_id: token_id.to_string(),
        },
        now,
    )?;
    Ok(())
}

pub fn check_token(
    ledger: &TrustLedger,
    token_id: &str,
    label: &str,
    operation: &str,
    now: Millis,
) -> Result<TokenDecision, MechanismError> {
    ledger.tokens().check(token_id, label, operation, now)
}
