//! Session keys and payload-level secure channels.
//!
//! A channel's base secret comes from X25519 over the two peers' identity
//! keys. The working key is re-derived from that secret and the first
//! peer's current session key, so renewing the session key retires every
//! envelope sealed under the old epoch.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::MechanismError;
use crate::crypto::{self, KeyPair, AEAD_KEY_LEN, NONCE_LEN};
use crate::trust::TrustLedger;
use crate::Millis;

#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct SessionKey {
    pub device_id: String,
    pub epoch: u64,
    #[serde(skip)]
    pub key: [u8; AEAD_KEY_LEN],
    pub created_at: Millis,
}

impl std::fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionKey")
            .field("device_id", &self.device_id)
            .field("epoch", &self.epoch)
            .field("created_at", &self.created_at)
            .finish_non_exhaustive()
    }
}

/// Latest session key per device; older epochs are dropped.
#[derive(Debug, Clone, Default)]
pub struct SessionKeys {
    keys: BTreeMap<String, SessionKey>,
}

impl SessionKeys {
    pub fn current(&self, device_id: &str) -> Option<&SessionKey> {
        self.keys.get(device_id)
    }

    pub(crate) fn current_or_init(
        &mut self,
        device_id: &str,
        now: Millis,
        rng: &mut dyn RngCore,
    ) -> &SessionKey {
        self.keys.entry(device_id.to_string()).or_insert_with(|| {
            let mut key = [0u8; AEAD_KEY_LEN];
            rng.fill_bytes(&mut key);
            SessionKey {
                device_id: device_id.to_string(),
                epoch: 0,
                key,
                created_at: now,
            }
        })
    }

    pub(crate) fn renew(&mut self, device_id: &str, now: Millis, rng: &mut dyn RngCore) -> &SessionKey {
        let epoch = self.keys.get(device_id).map_or(0, |k| k.epoch + 1);
        let mut key = [0u8; AEAD_KEY_LEN];
        rng.fill_bytes(&mut key);
        self.keys.insert(
            device_id.to_string(),
            SessionKey {
                device_id: device_id.to_string(),
                epoch,
                key,
                created_at: now,
            },
        );
        &self.keys[device_id]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub channel_id: String,
    pub epoch: u64,
    #[serde(with = "crypto::base64_bytes")]
    pub nonce: Vec<u8>,
    #[serde(with = "crypto::base64_bytes")]
    pub ct: Vec<u8>,
    #[serde(with = "crypto::base64_bytes")]
    pub tag: Vec<u8>,
    #[serde(with = "crypto::base64_bytes")]
    pub aad: Vec<u8>,
}

#[derive(Clone)]
pub struct SecureChannel {
    pub channel_id: String,
    pub peers: (String, String),
    base: [u8; AEAD_KEY_LEN],
    epoch: u64,
    key: Option<[u8; AEAD_KEY_LEN]>,
    send_counter: u64,
    recv_high: u64,
}

impl std::fmt::Debug for SecureChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureChannel")
            .field("channel_id", &self.channel_id)
            .field("peers", &self.peers)
            .field("epoch", &self.epoch)
            .field("send_counter", &self.send_counter)
            .field("recv_high", &self.recv_high)
            .finish_non_exhaustive()
    }
}

fn epoch_key(base: &[u8; AEAD_KEY_LEN], session: &SessionKey) -> [u8; AEAD_KEY_LEN] {
    crypto::hkdf_expand(base, &session.key, &session.epoch.to_be_bytes())
}

fn full_aad(channel_id: &str, epoch: u64, aad: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + channel_id.len() + aad.len());
    out.extend_from_slice(b"caspaas.envelope.v1");
    out.extend_from_slice(&(channel_id.len() as u32).to_be_bytes());
    out.extend_from_slice(channel_id.as_bytes());
    out.extend_from_slice(&epoch.to_be_bytes());
    out.extend_from_slice(aad);
    out
}

impl SecureChannel {
    /// Peer whose session key the channel follows.
    pub fn session_device(&self) -> &str {
        &self.peers.0
    }

    pub fn send_counter(&self) -> u64 {
        self.send_counter
    }

    fn sync(&mut self, session: &SessionKey) -> [u8; AEAD_KEY_LEN] {
        match self.key {
            Some(k) if self.epoch == session.epoch => k,
            _ => {
                let k = epoch_key(&self.base, session);
                self.epoch = session.epoch;
                self.key = Some(k);
                k
            }
        }
    }

    pub(crate) fn seal(&mut self, session: &SessionKey, payload: &[u8], aad: &[u8]) -> Envelope {
        let key = self.sync(session);
        self.send_counter += 1;
        let mut nonce = [0u8; NONCE_LEN];
        nonce[4..].copy_from_slice(&self.send_counter.to_be_bytes());
        let sealed = crypto::seal(
            &key,
            &nonce,
            payload,
            &full_aad(&self.channel_id, self.epoch, aad),
        );
        Envelope {
            channel_id: self.channel_id.clone(),
            epoch: self.epoch,
            nonce: nonce.to_vec(),
            ct: sealed.ciphertext,
            tag: sealed.tag.to_vec(),
            aad: aad.to_vec(),
        }
    }

    pub(crate) fn unseal(&mut self, session: &SessionKey, env: &Envelope) -> Result<Vec<u8>, MechanismError> {
        if env.channel_id != self.channel_id {
            return Err(MechanismError::TamperDetected);
        }
        if env.epoch != session.epoch {
            return Err(MechanismError::StaleEpoch {
                sealed: env.epoch,
                current: session.epoch,
            });
        }
        let key = self.sync(session);
        let nonce: [u8; NONCE_LEN] = env
            .nonce
            .as_slice()
            .try_into()
            .map_err(|_| MechanismError::TamperDetected)?;
        let plain = crypto::open(
            &key,
            &nonce,
            &env.ct,
            &env.tag,
            &full_aad(&self.channel_id, env.epoch, &env.aad),
        )
        .map_err(|_| MechanismError::TamperDetected)?;
        let counter = u64::from_be_bytes(nonce[4..].try_into().unwrap());
        if counter <= self.recv_high {
            return Err(MechanismError::NonceReuse(counter));
        }
        self.recv_high = counter;
        Ok(plain)
    }
}

/// Derives the base secret of a channel between two registered devices.
/// At least one side's private key must be held locally.
pub(crate) fn open_channel(
    ledger: &TrustLedger,
    keyring: &BTreeMap<String, KeyPair>,
    channel_id: String,
    a: &str,
    b: &str,
) -> Result<SecureChannel, MechanismError> {
    let pub_a = ledger
        .device(a)
        .map(|d| d.public_key)
        .ok_or_else(|| MechanismError::UnknownPeer(a.to_string()))?;
    let pub_b = ledger
        .device(b)
        .map(|d| d.public_key)
        .ok_or_else(|| MechanismError::UnknownPeer(b.to_string()))?;
    let info = [b"caspaas.channel.v1".as_slice(), channel_id.as_bytes()].concat();
    let base = if let Some(k) = keyring.get(a) {
        k.agree(&pub_b, b"", &info)
    } else if let Some(k) = keyring.get(b) {
        k.agree(&pub_a, b"", &info)
    } else {
        return Err(MechanismError::UnknownPeer(format!("no local key for {a} or {b}")));
    }
    .map_err(|e| MechanismError::UnknownPeer(e.to_string()))?;
    Ok(SecureChannel {
        channel_id,
        peers: (a.to_string(), b.to_string()),
        base,
        epoch: 0,
        key: None,
        send_counter: 0,
        recv_high: 0,
    })
}
