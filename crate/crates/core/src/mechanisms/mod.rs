//! Enforcement services: authentication, authorization, communication
//! security and privacy.

pub mod authentication;
pub mod authorization;
pub mod channel;
pub mod privacy;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::KeyPair;
use crate::ingestion::ContextValue;
use crate::trust::{TrustError, TrustLedger};
use crate::Millis;

pub use authentication::{AuthOutcome, CredentialStore, FactorClass, PresentedFactor};
pub use authorization::{AuthorizationToken, DenyReason, TokenBook, TokenDecision, TokenRequest};
pub use channel::{Envelope, SecureChannel, SessionKey, SessionKeys};
pub use privacy::{PrivacyOutcome, PrivacyTransform};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MechanismError {
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("unknown peer {0}")]
    UnknownPeer(String),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("envelope failed integrity check")]
    TamperDetected,
    #[error("envelope sealed under epoch {sealed}, current epoch is {current}")]
    StaleEpoch { sealed: u64, current: u64 },
    #[error("nonce counter {0} already used")]
    NonceReuse(u64),
    #[error("invalid privacy transform: {0}")]
    InvalidTransform(String),
    #[error(transparent)]
    Ledger(#[from] TrustError),
}

/// Mechanism state for one service instance. Randomness (session keys,
/// noise) comes from a single seeded generator so runs are reproducible.
pub struct Mechanisms {
    pub credentials: CredentialStore,
    sessions: SessionKeys,
    channels: BTreeMap<String, SecureChannel>,
    keyring: BTreeMap<String, KeyPair>,
    rng: ChaCha20Rng,
    channels_opened: u64,
}

impl Mechanisms {
    pub fn new(seed: u64) -> Self {
        Self {
            credentials: CredentialStore::default(),
            sessions: SessionKeys::default(),
            channels: BTreeMap::new(),
            keyring: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            channels_opened: 0,
        }
    }

    /// Holds a private identity key locally (simulated devices and apps).
    pub fn add_identity(&mut self, id: &str, key: KeyPair) {
        self.keyring.insert(id.to_string(), key);
    }

    pub fn authenticate(
        &self,
        subject: &str,
        required_factors: u8,
        presented: &[PresentedFactor],
    ) -> Result<AuthOutcome, MechanismError> {
        self.credentials.authenticate(subject, required_factors, presented)
    }

    pub fn session_key(&self, device_id: &str) -> Option<&SessionKey> {
        self.sessions.current(device_id)
    }

    pub fn renew_session_key(
        &mut self,
        ledger: &TrustLedger,
        device_id: &str,
        now: Millis,
    ) -> Result<SessionKey, MechanismError> {
        if ledger.device(device_id).is_none() {
            return Err(MechanismError::UnknownDevice(device_id.to_string()));
        }
        self.sessions.current_or_init(device_id, now, &mut self.rng);
        Ok(self.sessions.renew(device_id, now, &mut self.rng).clone())
    }

    pub fn establish_channel(
        &mut self,
        ledger: &TrustLedger,
        a: &str,
        b: &str,
        now: Millis,
    ) -> Result<String, MechanismError> {
        let id = format!("ch-{}-{a}-{b}", self.channels_opened + 1);
        let ch = channel::open_channel(ledger, &self.keyring, id.clone(), a, b)?;
        self.channels_opened += 1;
        self.sessions.current_or_init(a, now, &mut self.rng);
        self.channels.insert(id.clone(), ch);
        Ok(id)
    }

    pub fn channel(&self, channel_id: &str) -> Option<&SecureChannel> {
        self.channels.get(channel_id)
    }

    fn channel_and_session(
        &mut self,
        channel_id: &str,
    ) -> Result<(&mut SecureChannel, &SessionKey), MechanismError> {
        let ch = self
            .channels
            .get_mut(channel_id)
            .ok_or_else(|| MechanismError::UnknownChannel(channel_id.to_string()))?;
        let session = self
            .sessions
            .current(ch.session_device())
            .ok_or_else(|| MechanismError::UnknownPeer(ch.session_device().to_string()))?;
        Ok((ch, session))
    }

    pub fn seal(&mut self, channel_id: &str, payload: &[u8], aad: &[u8]) -> Result<Envelope, MechanismError> {
        let (ch, session) = self.channel_and_session(channel_id)?;
        Ok(ch.seal(session, payload, aad))
    }

    pub fn unseal(&mut self, channel_id: &str, envelope: &Envelope) -> Result<Vec<u8>, MechanismError> {
        let (ch, session) = self.channel_and_session(channel_id)?;
        ch.unseal(session, envelope)
    }

    pub fn apply_privacy(
        &mut self,
        value: &ContextValue,
        transform: &PrivacyTransform,
        user_key: &[u8],
        now: Millis,
    ) -> Result<PrivacyOutcome, MechanismError> {
        privacy::apply_privacy(value, transform, user_key, now, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trust::TrustConfig;

    fn setup() -> (TrustLedger, Mechanisms) {
        let mut l = TrustLedger::new(TrustConfig::default(), 0);
        let mut m = Mechanisms::new(1);
        for id in ["phone", "hospital"] {
            let kp = KeyPair::derive(id);
            l.register_owner("bob", KeyPair::derive("bob").public());
            l.register_device(id, "bob", kp.public(), 0).unwrap();
            m.add_identity(id, kp);
        }
        (l, m)
    }

    #[test]
    fn round_trip_including_empty() {
        let (l, mut m) = setup();
        let ch = m.establish_channel(&l, "phone", "hospital", 0).unwrap();
        for msg in [b"".as_slice(), b"glucose=142", &[0u8; 4096]] {
            let env = m.seal(&ch, msg, b"meta").unwrap();
            assert_eq!(m.unseal(&ch, &env).unwrap(), msg);
        }
    }

    #[test]
    fn renewal_makes_old_envelopes_stale() {
        let (l, mut m) = setup();
        let ch = m.establish_channel(&l, "phone", "hospital", 0).unwrap();
        let env = m.seal(&ch, b"x", b"").unwrap();
        assert_eq!(env.epoch, 0);
        assert_eq!(m.renew_session_key(&l, "phone", 1).unwrap().epoch, 1);
        assert_eq!(
            m.unseal(&ch, &env),
            Err(MechanismError::StaleEpoch { sealed: 0, current: 1 })
        );
        assert_eq!(m.renew_session_key(&l, "phone", 2).unwrap().epoch, 2);
        let env = m.seal(&ch, b"y", b"").unwrap();
        assert_eq!(env.epoch, 2);
        assert_eq!(m.unseal(&ch, &env).unwrap(), b"y");
    }

    #[test]
    fn first_renewal_gives_epoch_one() {
        let (l, mut m) = setup();
        assert_eq!(m.renew_session_key(&l, "hospital", 0).unwrap().epoch, 1);
        assert_eq!(
            m.renew_session_key(&l, "nobody", 0),
            Err(MechanismError::UnknownDevice("nobody".into()))
        );
    }

    #[test]
    fn tamper_and_replay() {
        let (l, mut m) = setup();
        let ch = m.establish_channel(&l, "phone", "hospital", 0).unwrap();
        let env = m.seal(&ch, b"payload", b"aad").unwrap();
        let mut bad = env.clone();
        bad.ct[0] ^= 1;
        assert_eq!(m.unseal(&ch, &bad), Err(MechanismError::TamperDetected));
        let mut bad = env.clone();
        bad.aad[0] ^= 0x80;
        assert_eq!(m.unseal(&ch, &bad), Err(MechanismError::TamperDetected));
        m.unseal(&ch, &env).unwrap();
        assert_eq!(m.unseal(&ch, &env), Err(MechanismError::NonceReuse(1)));
    }

    #[test]
    fn unknown_peer() {
        let (l, mut m) = setup();
        assert!(matches!(
            m.establish_channel(&l, "phone", "ghost", 0),
            Err(MechanismError::UnknownPeer(_))
        ));
    }

    #[test]
    fn envelope_wire_format() {
        let (l, mut m) = setup();
        let ch = m.establish_channel(&l, "phone", "hospital", 0).unwrap();
        let env = m.seal(&ch, b"hi", b"a").unwrap();
        let v: serde_json::Value = serde_json::to_value(&env).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 6);
        for k in ["channel_id", "epoch", "nonce", "ct", "tag", "aad"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let back: Envelope = serde_json::from_value(v).unwrap();
        assert_eq!(back, env);
    }
}
