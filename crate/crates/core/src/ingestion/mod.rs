//! Context acquisition: verify signed device reports, normalize raw values
//! and append the result to the Context Information Base.

mod cib;
pub mod normalize;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, KeyPair};
use crate::qoc::{self, QoCVector, QocSettings};
use crate::trust::{Rejection, TrustLedger};
use crate::Millis;

pub use cib::ContextInformationBase;
pub use normalize::{NormalizationRule, NormalizationTables};

pub const DEFAULT_CLOCK_SKEW_MS: Millis = 5_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("signature does not verify")]
    BadSignature,
    #[error("replayed sequence {got} (last accepted {last})")]
    ReplayedSequence { last: u64, got: u64 },
    #[error("observed_at {observed_at} is more than {bound} ms ahead of {now}")]
    ClockSkewExceeded {
        observed_at: Millis,
        now: Millis,
        bound: Millis,
    },
    #[error("no normalization for {attribute} = {raw}")]
    UnnormalizableValue { attribute: String, raw: String },
    #[error("invalid window [{t0}, {t1}]")]
    InvalidWindow { t0: Millis, t1: Millis },
}

impl From<Rejection> for IngestError {
    fn from(r: Rejection) -> Self {
        match r {
            // Only reachable when the registry changed between checks.
            Rejection::UnknownDevice => IngestError::UnknownDevice(String::new()),
            Rejection::BadSignature => IngestError::BadSignature,
            Rejection::Replay { last, got } => IngestError::ReplayedSequence { last, got },
        }
    }
}

/// Raw sensor reading as sent by a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Text(String),
    Geo { lat: f64, lon: f64 },
}

impl fmt::Display for RawValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawValue::Number(v) => write!(f, "{v}"),
            RawValue::Text(s) => write!(f, "{s:?}"),
            RawValue::Geo { lat, lon } => write!(f, "({lat}, {lon})"),
        }
    }
}

impl RawValue {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            RawValue::Number(v) => {
                out.push(0);
                out.extend_from_slice(&v.to_bits().to_be_bytes());
            }
            RawValue::Text(s) => {
                out.push(1);
                push_field(out, s.as_bytes());
            }
            RawValue::Geo { lat, lon } => {
                out.push(2);
                out.extend_from_slice(&lat.to_bits().to_be_bytes());
                out.extend_from_slice(&lon.to_bits().to_be_bytes());
            }
        }
    }
}

fn push_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Signed observation. Wire form is JSON with a base64 signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub device_id: String,
    pub attribute: String,
    pub raw_value: RawValue,
    pub observed_at: Millis,
    pub sequence: u64,
    #[serde(with = "crypto::base64_bytes")]
    pub signature: Vec<u8>,
}

impl ContextReport {
    /// Bytes covered by the device signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96);
        push_field(&mut out, b"caspaas.report.v1");
        push_field(&mut out, self.device_id.as_bytes());
        push_field(&mut out, self.attribute.as_bytes());
        self.raw_value.encode(&mut out);
        out.extend_from_slice(&self.observed_at.to_be_bytes());
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out
    }

    pub fn signed(
        key: &KeyPair,
        device_id: &str,
        attribute: &str,
        raw_value: RawValue,
        observed_at: Millis,
        sequence: u64,
    ) -> Self {
        let mut r = ContextReport {
            device_id: device_id.to_string(),
            attribute: attribute.to_string(),
            raw_value,
            observed_at,
            sequence,
            signature: Vec::new(),
        };
        r.signature = key.sign(&r.signing_bytes()).to_vec();
        r
    }
}

/// Canonical context value: a vocabulary label or a number with a unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContextValue {
    Number(f64),
    Label(String),
}

impl ContextValue {
    pub fn as_label(&self) -> Option<&str> {
        match self {
            ContextValue::Label(s) => Some(s),
            ContextValue::Number(_) => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            ContextValue::Number(v) => Some(*v),
            ContextValue::Label(_) => None,
        }
    }
}

impl fmt::Display for ContextValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextValue::Number(v) => write!(f, "{v}"),
            ContextValue::Label(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowLevelContext {
    pub key: String,
    pub value: ContextValue,
    pub unit: Option<String>,
    pub observed_at: Millis,
    pub source: String,
    pub qoc: QoCVector,
}

/// Context acquisition stage: normalization tables plus the CIB.
#[derive(Debug, Clone)]
pub struct Ingestion {
    tables: NormalizationTables,
    clock_skew_ms: Millis,
    cib: ContextInformationBase,
}

impl Ingestion {
    pub fn new(tables: NormalizationTables, clock_skew_ms: Millis) -> Self {
        Self {
            tables,
            clock_skew_ms,
            cib: ContextInformationBase::new(),
        }
    }

    pub fn tables(&self) -> &NormalizationTables {
        &self.tables
    }

    pub fn cib(&self) -> &ContextInformationBase {
        &self.cib
    }

    pub fn normalize(
        &self,
        attribute: &str,
        raw: &RawValue,
    ) -> Result<(ContextValue, Option<String>), IngestError> {
        self.tables.normalize(attribute, raw)
    }

    pub fn query_cib(&self, key: &str, t0: Millis, t1: Millis) -> Result<Vec<LowLevelContext>, IngestError> {
        self.cib.query(key, t0, t1)
    }

    /// Verifies, normalizes, scores and stores one report.
    ///
    /// Nothing is written (neither the CIB nor the device's sequence
    /// counter) unless every check passes.
    pub fn ingest_report(
        &mut self,
        report: &ContextReport,
        now: Millis,
        ledger: &mut TrustLedger,
        qoc_settings: &QocSettings,
    ) -> Result<LowLevelContext, IngestError> {
        let reputation = ledger
            .reputation(&report.device_id)
            .ok_or_else(|| IngestError::UnknownDevice(report.device_id.clone()))?;
        if report.observed_at > now.saturating_add(self.clock_skew_ms) {
            return Err(IngestError::ClockSkewExceeded {
                observed_at: report.observed_at,
                now,
                bound: self.clock_skew_ms,
            });
        }
        ledger.check_report(report)?;
        let (value, unit) = self.tables.normalize(&report.attribute, &report.raw_value)?;
        ledger.commit_sequence(&report.device_id, report.sequence);

        let mut record = LowLevelContext {
            key: report.attribute.clone(),
            value,
            unit,
            observed_at: report.observed_at,
            source: report.device_id.clone(),
            qoc: QoCVector::default(),
        };
        record.qoc = qoc::score(&record, now, qoc_settings.for_key(&record.key), reputation);
        self.cib.append(record.clone());
        Ok(record)
    }
}
