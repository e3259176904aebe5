//! Privacy transforms applied to released context values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MechanismError;
use crate::crypto;
use crate::ingestion::ContextValue;
use crate::Millis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrivacyTransform {
    Suppress,
    Generalize { width: f64 },
    Pseudonymize,
    Noise { bound: f64 },
    Delay { ms: Millis },
}

impl PrivacyTransform {
    pub fn validate(&self) -> Result<(), MechanismError> {
        let bad = |m: &str| Err(MechanismError::InvalidTransform(m.to_string()));
        match self {
            PrivacyTransform::Generalize { width } if !(width.is_finite() && *width > 0.0) => {
                bad("bucket width must be positive")
            }
            PrivacyTransform::Noise { bound } if !(bound.is_finite() && *bound >= 0.0) => {
                bad("noise bound must be non-negative")
            }
            PrivacyTransform::Delay { ms } if *ms < 0 => bad("delay must be non-negative"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PrivacyOutcome {
    Released { value: ContextValue },
    Suppressed,
    Scheduled { at: Millis, value: ContextValue },
}

/// Half-open bucket `[floor(v/w)·w, floor(v/w)·w + w)`.
pub fn generalize(v: f64, width: f64) -> String {
    let lo = (v / width).floor() * width;
    format!("[{},{})", lo, lo + width)
}

/// Keyed identifier, stable per (value, key).
pub fn pseudonymize(value: &str, key: &[u8]) -> String {
    let mac = crypto::hmac_sha256(key, value.as_bytes());
    let hex: String = mac[..16].iter().map(|b| format!("{b:02x}")).collect();
    format!("psn-{hex}")
}

pub fn apply_privacy<R: Rng + ?Sized>(
    value: &ContextValue,
    transform: &PrivacyTransform,
    user_key: &[u8],
    now: Millis,
    rng: &mut R,
) -> Result<PrivacyOutcome, MechanismError> {
    transform.validate()?;
    let numeric = || {
        value
            .as_number()
            .ok_or_else(|| MechanismError::InvalidTransform("transform needs a numeric value".into()))
    };
    Ok(match transform {
        PrivacyTransform::Suppress => PrivacyOutcome::Suppressed,
        PrivacyTransform::Generalize { width } => PrivacyOutcome::Released {
            value: ContextValue::Label(generalize(numeric()?, *width)),
        },
        PrivacyTransform::Pseudonymize => PrivacyOutcome::Released {
            value: ContextValue::Label(pseudonymize(&value.to_string(), user_key)),
        },
        PrivacyTransform::Noise { bound } => {
            let v = numeric()?;
            let u = if *bound == 0.0 {
                0.0
            } else {
                rng.gen_range(-*bound..=*bound)
            };
            PrivacyOutcome::Released {
                value: ContextValue::Number(v + u),
            }
        }
        PrivacyTransform::Delay { ms } => PrivacyOutcome::Scheduled {
            at: now + ms,
            value: value.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashMap;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn glucose_bucket() {
        assert_eq!(generalize(142.0, 20.0), "[140,160)");
        let out = apply_privacy(
            &ContextValue::Number(142.0),
            &PrivacyTransform::Generalize { width: 20.0 },
            b"k",
            0,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(
            out,
            PrivacyOutcome::Released {
                value: ContextValue::Label("[140,160)".into())
            }
        );
    }

    #[test]
    fn bucket_edges_are_half_open() {
        assert_eq!(generalize(140.0, 20.0), "[140,160)");
        assert_eq!(generalize(160.0, 20.0), "[160,180)");
        assert_eq!(generalize(-1.0, 20.0), "[-20,0)");
    }

    #[test]
    fn suppress_and_delay() {
        let v = ContextValue::Number(1.0);
        assert_eq!(
            apply_privacy(&v, &PrivacyTransform::Suppress, b"k", 0, &mut rng()).unwrap(),
            PrivacyOutcome::Suppressed
        );
        assert_eq!(
            apply_privacy(&v, &PrivacyTransform::Delay { ms: 500 }, b"k", 1_000, &mut rng()).unwrap(),
            PrivacyOutcome::Scheduled { at: 1_500, value: v }
        );
    }

    #[test]
    fn invalid_params_rejected() {
        let v = ContextValue::Number(1.0);
        for t in [
            PrivacyTransform::Generalize { width: 0.0 },
            PrivacyTransform::Noise { bound: -1.0 },
            PrivacyTransform::Delay { ms: -1 },
        ] {
            assert!(matches!(
                apply_privacy(&v, &t, b"k", 0, &mut rng()),
                Err(MechanismError::InvalidTransform(_))
            ));
        }
        assert!(apply_privacy(
            &ContextValue::Label("home".into()),
            &PrivacyTransform::Generalize { width: 1.0 },
            b"k",
            0,
            &mut rng()
        )
        .is_err());
    }

    #[test]
    fn pseudonyms_are_keyed_and_stable() {
        let mut by_key_a: HashMap<String, String> = HashMap::new();
        let mut seen_b = HashMap::new();
        for i in 0..1_000 {
            let v = format!("value-{i}");
            let a = pseudonymize(&v, b"key-a");
            assert_eq!(a, pseudonymize(&v, b"key-a"));
            let b = pseudonymize(&v, b"key-b");
            assert_ne!(a, b);
            assert!(by_key_a.insert(a, v.clone()).is_none(), "collision under key a");
            assert!(seen_b.insert(b, v).is_none(), "collision under key b");
        }
    }
}
