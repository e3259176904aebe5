//! Device trust management: registry, report verification, reputation,
//! ownership and the contract-gated ledger that records all of it.

pub mod chain;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, PublicKey};
use crate::ingestion::ContextReport;
use crate::mechanisms::authorization::TokenBook;
use crate::Millis;

pub use chain::{verify_chain, HashChain, LedgerBlock, LedgerEntry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrustError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("device {0} is already registered")]
    DuplicateDevice(String),
    #[error("unknown owner {0}")]
    UnknownOwner(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
}

/// Why a report was refused by [`TrustLedger::verify_report`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    UnknownDevice,
    BadSignature,
    Replay { last: u64, got: u64 },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::UnknownDevice => f.write_str("unknown device"),
            Rejection::BadSignature => f.write_str("bad signature"),
            Rejection::Replay { last, got } => {
                write!(f, "replayed sequence {got} (last accepted {last})")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustConfig {
    /// Smoothing factor of the reputation average.
    pub alpha: f64,
    pub initial_reputation: f64,
    /// A reputation checkpoint block is appended after this many updates.
    pub checkpoint_every: u64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            initial_reputation: 0.5,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRecord {
    pub device_id: String,
    pub public_key: PublicKey,
    pub owner: String,
    pub reputation: f64,
    pub last_sequence: Option<u64>,
    /// Number of completed ownership transfers; part of the transfer message.
    pub transfers: u64,
}

/// Message a current owner signs to hand a device over.
pub fn transfer_message(device_id: &str, new_owner: &str, transfers: u64) -> Vec<u8> {
    crypto::sha256_parts(&[
        b"caspaas.transfer.v1",
        device_id.as_bytes(),
        new_owner.as_bytes(),
        &transfers.to_be_bytes(),
    ])
    .to_vec()
}

/// The reputation recurrence `rep' = (1 - alpha) * rep + alpha * q`, clamped to [0, 1].
pub fn next_reputation(rep: f64, q: f64, alpha: f64) -> f64 {
    ((1.0 - alpha) * rep + alpha * q.clamp(0.0, 1.0)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct TrustLedger {
    config: TrustConfig,
    devices: BTreeMap<String, DeviceRecord>,
    owners: BTreeMap<String, PublicKey>,
    chain: HashChain,
    tokens: TokenBook,
    updates_since_checkpoint: u64,
}

impl TrustLedger {
    pub fn new(config: TrustConfig, genesis_at: Millis) -> Self {
        Self {
            config,
            devices: BTreeMap::new(),
            owners: BTreeMap::new(),
            chain: HashChain::with_genesis(genesis_at),
            tokens: TokenBook::default(),
            updates_since_checkpoint: 0,
        }
    }

    pub fn config(&self) -> &TrustConfig {
        &self.config
    }

    /// Adds an owner to the directory used by the ownership contract.
    /// Owner keys live off-chain; only device-level events are blocks.
    pub fn register_owner(&mut self, owner: &str, key: PublicKey) {
        self.owners.insert(owner.to_string(), key);
    }

    pub fn owner_key(&self, owner: &str) -> Option<&PublicKey> {
        self.owners.get(owner)
    }

    pub fn register_device(
        &mut self,
        device_id: &str,
        owner: &str,
        public_key: PublicKey,
        now: Millis,
    ) -> Result<DeviceRecord, TrustError> {
        if self.devices.contains_key(device_id) {
            return Err(TrustError::DuplicateDevice(device_id.to_string()));
        }
        self.append(
            LedgerEntry::Register {
                device_id: device_id.to_string(),
                owner: owner.to_string(),
                public_key,
            },
            now,
        )?;
        Ok(self.devices[device_id].clone())
    }

    pub fn device(&self, device_id: &str) -> Option<&DeviceRecord> {
        self.devices.get(device_id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    pub fn devices_owned_by<'a>(&'a self, owner: &'a str) -> impl Iterator<Item = &'a DeviceRecord> {
        self.devices.values().filter(move |d| d.owner == owner)
    }

    pub fn reputation(&self, device_id: &str) -> Option<f64> {
        self.devices.get(device_id).map(|d| d.reputation)
    }

    /// Checks a report without touching any state.
    pub fn check_report(&self, report: &ContextReport) -> Result<(), Rejection> {
        let dev = self
            .devices
            .get(&report.device_id)
            .ok_or(Rejection::UnknownDevice)?;
        dev.public_key
            .verify(&report.signing_bytes(), &report.signature)
            .map_err(|_| Rejection::BadSignature)?;
        if let Some(last) = dev.last_sequence {
            if report.sequence <= last {
                return Err(Rejection::Replay {
                    last,
                    got: report.sequence,
                });
            }
        }
        Ok(())
    }

    /// Records `sequence` as the last accepted one for the device.
    pub fn commit_sequence(&mut self, device_id: &str, sequence: u64) {
        if let Some(d) = self.devices.get_mut(device_id) {
            d.last_sequence = Some(sequence);
        }
    }

    /// Full verification; on success the device's sequence counter advances.
    pub fn verify_report(&mut self, report: &ContextReport) -> Result<(), Rejection> {
        self.check_report(report)?;
        self.commit_sequence(&report.device_id, report.sequence);
        Ok(())
    }

    pub fn update_reputation(
        &mut self,
        device_id: &str,
        qoc_mean: f64,
        now: Millis,
    ) -> Result<f64, TrustError> {
        let alpha = self.config.alpha;
        let dev = self
            .devices
            .get_mut(device_id)
            .ok_or_else(|| TrustError::UnknownDevice(device_id.to_string()))?;
        dev.reputation = next_reputation(dev.reputation, qoc_mean, alpha);
        let rep = dev.reputation;
        self.updates_since_checkpoint += 1;
        if self.config.checkpoint_every > 0
            && self.updates_since_checkpoint >= self.config.checkpoint_every
        {
            let reputations = self
                .devices
                .values()
                .map(|d| (d.device_id.clone(), d.reputation))
                .collect();
            self.append(LedgerEntry::ReputationCheckpoint { reputations }, now)?;
        }
        Ok(rep)
    }

    pub fn transfer_ownership(
        &mut self,
        device_id: &str,
        new_owner: &str,
        signature: &[u8],
        now: Millis,
    ) -> Result<DeviceRecord, TrustError> {
        let from = self
            .devices
            .get(device_id)
            .ok_or_else(|| TrustError::UnknownDevice(device_id.to_string()))?
            .owner
            .clone();
        self.append(
            LedgerEntry::OwnershipTransfer {
                device_id: device_id.to_string(),
                from,
                to: new_owner.to_string(),
                signature: signature.to_vec(),
            },
            now,
        )?;
        Ok(self.devices[device_id].clone())
    }

    /// Contract predicate for an entry against current state.
    pub fn check_contract(&self, entry: &LedgerEntry) -> Result<(), TrustError> {
        let violation = |m: String| Err(TrustError::ContractViolation(m));
        match entry {
            LedgerEntry::Genesis { .. } => violation("genesis may only open a chain".into()),
            LedgerEntry::Register { device_id, .. } => {
                if self.devices.contains_key(device_id) {
                    return Err(TrustError::DuplicateDevice(device_id.clone()));
                }
                Ok(())
            }
            LedgerEntry::OwnershipTransfer {
                device_id,
                from,
                to,
                signature,
            } => {
                let dev = self
                    .devices
                    .get(device_id)
                    .ok_or_else(|| TrustError::UnknownDevice(device_id.clone()))?;
                if &dev.owner != from {
                    return violation(format!("{from} is not the current owner of {device_id}"));
                }
                if !self.owners.contains_key(to) {
                    return Err(TrustError::UnknownOwner(to.clone()));
                }
                let key = self
                    .owners
                    .get(from)
                    .ok_or_else(|| TrustError::UnknownOwner(from.clone()))?;
                let msg = transfer_message(device_id, to, dev.transfers);
                if key.verify(&msg, signature).is_err() {
                    return violation(format!("transfer of {device_id} not signed by {from}"));
                }
                Ok(())
            }
            LedgerEntry::TokenGrant {
                token_id,
                operations,
                ..
            } => {
                if self.tokens.get(token_id).is_some() {
                    return violation(format!("token {token_id} already exists"));
                }
                if operations.is_empty() {
                    return violation(format!("token {token_id} grants no operations"));
                }
                Ok(())
            }
            LedgerEntry::TokenRevoke { token_id } => match self.tokens.get(token_id) {
                None => violation(format!("token {token_id} does not exist")),
                Some(t) if t.is_revoked() => violation(format!("token {token_id} already revoked")),
                Some(_) => Ok(()),
            },
            LedgerEntry::ReputationCheckpoint { reputations } => {
                for (id, r) in reputations {
                    if !self.devices.contains_key(id) {
                        return Err(TrustError::UnknownDevice(id.clone()));
                    }
                    if !(0.0..=1.0).contains(r) {
                        return violation(format!("reputation of {id} out of range"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Appends an entry once its contract rule accepts, then applies it.
    pub fn append(&mut self, entry: LedgerEntry, now: Millis) -> Result<LedgerBlock, TrustError> {
        self.check_contract(&entry)?;
        self.apply(&entry);
        if matches!(entry, LedgerEntry::ReputationCheckpoint { .. }) {
            self.updates_since_checkpoint = 0;
        }
        Ok(self.chain.push(entry, now).clone())
    }

    fn apply(&mut self, entry: &LedgerEntry) {
        match entry {
            LedgerEntry::Register {
                device_id,
                owner,
                public_key,
            } => {
                self.devices.insert(
                    device_id.clone(),
                    DeviceRecord {
                        device_id: device_id.clone(),
                        public_key: *public_key,
                        owner: owner.clone(),
                        reputation: self.config.initial_reputation,
                        last_sequence: None,
                        transfers: 0,
                    },
                );
            }
            LedgerEntry::OwnershipTransfer { device_id, to, .. } => {
                if let Some(d) = self.devices.get_mut(device_id) {
                    d.owner = to.clone();
                    d.transfers += 1;
                }
            }
            LedgerEntry::TokenGrant { .. } | LedgerEntry::TokenRevoke { .. } => {
                self.tokens.apply(entry);
            }
            LedgerEntry::Genesis { .. } | LedgerEntry::ReputationCheckpoint { .. } => {}
        }
    }

    pub fn tokens(&self) -> &TokenBook {
        &self.tokens
    }

    pub fn chain(&self) -> &HashChain {
        &self.chain
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        self.chain.blocks()
    }

    pub fn verify_chain(&self) -> bool {
        self.chain.verify()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::ingestion::RawValue;

    fn ledger() -> TrustLedger {
        let mut l = TrustLedger::new(TrustConfig::default(), 0);
        l.register_owner("alice", KeyPair::derive("owner:alice").public());
        l.register_owner("bob", KeyPair::derive("owner:bob").public());
        l
    }

    fn report(key: &KeyPair, device: &str, seq: u64) -> ContextReport {
        ContextReport::signed(key, device, "motion", RawValue::Number(0.0), 1_000, seq)
    }

    #[test]
    fn fresh_registration_starts_at_half() {
        let mut l = ledger();
        let rec = l
            .register_device("d1", "alice", KeyPair::derive("d1").public(), 5)
            .unwrap();
        assert_eq!(rec.reputation, 0.5);
        assert_eq!(l.blocks().len(), 2);
        assert_eq!(
            l.register_device("d1", "alice", KeyPair::derive("d1").public(), 6),
            Err(TrustError::DuplicateDevice("d1".into()))
        );
    }

    #[test]
    fn registrations_chain_to_genesis() {
        let mut l = ledger();
        l.register_device("d1", "alice", KeyPair::derive("d1").public(), 1)
            .unwrap();
        l.register_device("d2", "alice", KeyPair::derive("d2").public(), 2)
            .unwrap();
        let b = l.blocks();
        assert_eq!(b[1].prev_hash, b[0].hash);
        assert_eq!(b[2].prev_hash, b[1].hash);
        assert!(l.verify_chain());
    }

    #[test]
    fn report_verification_states() {
        let mut l = ledger();
        let k = KeyPair::derive("d1");
        l.register_device("d1", "alice", k.public(), 0).unwrap();
        assert_eq!(l.verify_report(&report(&k, "d1", 1)), Ok(()));
        assert_eq!(
            l.verify_report(&report(&KeyPair::derive("other"), "d1", 2)),
            Err(Rejection::BadSignature)
        );
        assert_eq!(
            l.verify_report(&report(&k, "d1", 1)),
            Err(Rejection::Replay { last: 1, got: 1 })
        );
        assert_eq!(
            l.verify_report(&report(&k, "nope", 1)),
            Err(Rejection::UnknownDevice)
        );
    }

    #[test]
    fn reputation_update_examples() {
        let mut l = ledger();
        l.register_device("d1", "alice", KeyPair::derive("d1").public(), 0)
            .unwrap();
        let r = l.update_reputation("d1", 1.0, 1).unwrap();
        assert!((r - 0.55).abs() < 1e-12);
        let fixed = l.update_reputation("d1", r, 2).unwrap();
        assert!((fixed - r).abs() < 1e-12);
        assert_eq!(
            l.update_reputation("ghost", 1.0, 3),
            Err(TrustError::UnknownDevice("ghost".into()))
        );
    }

    #[test]
    fn checkpoint_every_n_updates() {
        let mut l = TrustLedger::new(
            TrustConfig {
                checkpoint_every: 3,
                ..TrustConfig::default()
            },
            0,
        );
        l.register_owner("alice", KeyPair::derive("owner:alice").public());
        l.register_device("d1", "alice", KeyPair::derive("d1").public(), 0)
            .unwrap();
        for i in 0..7 {
            l.update_reputation("d1", 1.0, i).unwrap();
        }
        let checkpoints = l
            .blocks()
            .iter()
            .filter(|b| b.entry.kind() == "reputation_checkpoint")
            .count();
        assert_eq!(checkpoints, 2);
    }

    #[test]
    fn ownership_transfer_contract() {
        let mut l = ledger();
        let dk = KeyPair::derive("d1");
        l.register_device("d1", "alice", dk.public(), 0).unwrap();
        let msg = transfer_message("d1", "bob", 0);

        let wrong = KeyPair::derive("owner:bob").sign(&msg);
        assert!(matches!(
            l.transfer_ownership("d1", "bob", &wrong, 1),
            Err(TrustError::ContractViolation(_))
        ));
        let before = l.blocks().len();
        let good = KeyPair::derive("owner:alice").sign(&msg);
        let rec = l.transfer_ownership("d1", "bob", &good, 2).unwrap();
        assert_eq!(rec.owner, "bob");
        assert_eq!(l.blocks().len(), before + 1);

        // The same signature cannot be replayed for a second transfer.
        assert!(l.transfer_ownership("d1", "bob", &good, 3).is_err());

        // Device key is unchanged by an ownership transfer.
        assert_eq!(l.verify_report(&report(&dk, "d1", 1)), Ok(()));
    }

    #[test]
    fn transfer_of_unknown_device() {
        let mut l = ledger();
        assert_eq!(
            l.transfer_ownership("ghost", "bob", &[0; 64], 0),
            Err(TrustError::UnknownDevice("ghost".into()))
        );
    }
}
