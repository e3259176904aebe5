//! Factor-based authentication of users.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MechanismError;
use crate::crypto;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorClass {
    Knowledge,
    Possession,
}

impl FactorClass {
    /// Factor classes demanded for a given factor count, strongest last.
    pub fn required(count: u8) -> &'static [FactorClass] {
        match count {
            0 => &[],
            1 => &[FactorClass::Knowledge],
            _ => &[FactorClass::Knowledge, FactorClass::Possession],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentedFactor {
    pub class: FactorClass,
    pub secret: String,
}

#[derive(Debug, Clone)]
struct Credential {
    salt: [u8; 16],
    digest: crypto::Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", content = "reason", rename_all = "snake_case")]
pub enum AuthOutcome {
    Pass,
    Fail(String),
}

impl AuthOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, AuthOutcome::Pass)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CredentialStore {
    subjects: BTreeMap<String, BTreeMap<FactorClass, Credential>>,
}

fn salt_for(subject: &str, class: FactorClass) -> [u8; 16] {
    let d = crypto::sha256_parts(&[b"caspaas.cred.salt", subject.as_bytes(), &[class as u8]]);
    d[..16].try_into().unwrap()
}

fn digest(salt: &[u8], secret: &str) -> crypto::Digest {
    crypto::sha256_parts(&[salt, secret.as_bytes()])
}

impl CredentialStore {
    pub fn register_subject(&mut self, subject: &str) {
        self.subjects.entry(subject.to_string()).or_default();
    }

    pub fn enroll(&mut self, subject: &str, class: FactorClass, secret: &str) {
        let salt = salt_for(subject, class);
        self.subjects.entry(subject.to_string()).or_default().insert(
            class,
            Credential {
                salt,
                digest: digest(&salt, secret),
            },
        );
    }

    /// Passes iff every required class is presented and every presented
    /// factor verifies.
    pub fn authenticate(
        &self,
        subject: &str,
        required_factors: u8,
        presented: &[PresentedFactor],
    ) -> Result<AuthOutcome, MechanismError> {
        let creds = self
            .subjects
            .get(subject)
            .ok_or_else(|| MechanismError::UnknownSubject(subject.to_string()))?;
        for class in FactorClass::required(required_factors) {
            if !presented.iter().any(|f| f.class == *class) {
                return Ok(AuthOutcome::Fail(format!("missing {class:?} factor").to_lowercase()));
            }
        }
        for f in presented {
            let ok = creds
                .get(&f.class)
                .is_some_and(|c| crypto::ct_eq(&digest(&c.salt, &f.secret), &c.digest));
            if !ok {
                return Ok(AuthOutcome::Fail(format!("{:?} factor rejected", f.class).to_lowercase()));
            }
        }
        Ok(AuthOutcome::Pass)
    }
}
