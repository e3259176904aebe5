use std::collections::BTreeMap;

use caspaas_core::crypto::KeyPair;
use caspaas_core::dissemination::risk::ThreatPredicate;
use caspaas_core::dissemination::{assess_risk, ThreatCatalog, ThreatEntry};
use caspaas_core::mechanisms::authorization::{decide, grant_token};
use caspaas_core::mechanisms::privacy::{generalize, pseudonymize};
use caspaas_core::mechanisms::{AuthorizationToken, DenyReason, TokenDecision, TokenRequest};
use caspaas_core::policy::{stable_order, OrderingConstraint, PlanError, ACTION_KINDS};
use caspaas_core::predicate::{glob_match, Condition, LabelPattern};
use caspaas_core::qoc::timeliness;
use caspaas_core::trust::chain::{export_jsonl, import_jsonl};
use caspaas_core::trust::{next_reputation, verify_chain, TrustConfig, TrustLedger};
use proptest::prelude::*;

fn wildcard(p: &[u8], t: &[u8]) -> bool {
    match (p.first(), t.first()) {
        (None, None) => true,
        (Some(b'*'), _) => wildcard(&p[1..], t) || (!t.is_empty() && wildcard(p, &t[1..])),
        (Some(b'?'), Some(_)) => wildcard(&p[1..], &t[1..]),
        (Some(a), Some(b)) if a == b => wildcard(&p[1..], &t[1..]),
        _ => false,
    }
}

fn satisfies(order: &[usize], kinds: &[&str], cs: &[OrderingConstraint]) -> bool {
    order.iter().enumerate().all(|(i, &a)| {
        order[i + 1..]
            .iter()
            .all(|&b| !cs.iter().any(|c| c.before == kinds[b] && c.after == kinds[a]))
    })
}

/// First valid permutation in lexicographic order, if any.
fn brute_force(kinds: &[&str], cs: &[OrderingConstraint]) -> Option<Vec<usize>> {
    let n = kinds.len();
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        if satisfies(&perm, kinds, cs) {
            return Some(perm);
        }
        // Next permutation.
        let i = (1..n).rev().find(|&i| perm[i - 1] < perm[i])?;
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
        perm.swap(i - 1, j);
        perm[i..].reverse();
    }
}

fn token(revoked: bool, expiry: i64, constraint: &str, ops: &[&str]) -> AuthorizationToken {
    let mut l = TrustLedger::new(TrustConfig::default(), 0);
    let t = grant_token(
        &mut l,
        &TokenRequest {
            token_id: Some("t".into()),
            subject: "s".into(),
            resource: "r".into(),
            operations: ops.iter().map(|s| s.to_string()).collect(),
            constraint: LabelPattern::new(constraint).unwrap(),
            expiry,
        },
        0,
    )
    .unwrap();
    if revoked {
        caspaas_core::mechanisms::authorization::revoke_token(&mut l, "t", 0).unwrap();
        return l.tokens().get("t").unwrap().clone();
    }
    t
}

proptest! {
    #[test]
    fn glob_agrees_with_reference(p in "[ab_*?]{0,6}", t in "[ab_]{0,8}") {
        prop_assert_eq!(glob_match(&p, &t), wildcard(p.as_bytes(), t.as_bytes()));
    }

    #[test]
    fn stable_order_is_lexicographically_smallest(
        picks in prop::collection::vec(0..ACTION_KINDS.len(), 0..7),
        pairs in prop::collection::vec((0..ACTION_KINDS.len(), 0..ACTION_KINDS.len()), 0..5),
    ) {
        let kinds: Vec<&str> = picks.iter().map(|&i| ACTION_KINDS[i]).collect();
        let cs: Vec<OrderingConstraint> = pairs
            .iter()
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| OrderingConstraint::new(ACTION_KINDS[a], ACTION_KINDS[b]))
            .collect();
        match (stable_order(&kinds, &cs), brute_force(&kinds, &cs)) {
            (Ok(got), Some(want)) => prop_assert_eq!(got, want),
            (Err(PlanError::CyclicConstraints(_)), None) => {}
            (got, want) => prop_assert!(false, "{:?} vs {:?}", got, want),
        }
    }

    #[test]
    fn exported_ledger_detects_any_byte_change(
        grants in 1..12usize,
        pos in any::<prop::sample::Index>(),
        bit in 0..8u8,
    ) {
        let mut l = TrustLedger::new(TrustConfig::default(), 0);
        l.register_owner("o", KeyPair::derive("o").public());
        for i in 0..grants {
            let id = format!("d{i}");
            l.register_device(&id, "o", KeyPair::derive(&id).public(), i as i64).unwrap();
        }
        let mut buf = Vec::new();
        export_jsonl(l.blocks(), &mut buf).unwrap();
        let back = import_jsonl(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, l.blocks());

        let i = pos.index(buf.len());
        buf[i] ^= 1 << bit;
        if let Ok(blocks) = import_jsonl(buf.as_slice()) {
            if blocks != l.blocks() {
                prop_assert!(!verify_chain(&blocks));
            }
        }
    }

    #[test]
    fn generalize_bucket_contains_value(v in -1.0e6f64..1.0e6, width in 0.5f64..500.0) {
        let s = generalize(v, width);
        let inner = s.strip_prefix('[').and_then(|s| s.strip_suffix(')')).unwrap();
        let (lo, hi) = inner.split_once(',').unwrap();
        let (lo, hi): (f64, f64) = (lo.parse().unwrap(), hi.parse().unwrap());
        prop_assert!(lo <= v && v < hi, "{} not in {}", v, s);
        prop_assert!((hi - lo - width).abs() < 1e-6 * width.max(1.0));
    }

    #[test]
    fn pseudonyms_are_stable_and_keyed(a in "[a-z0-9]{1,12}", b in "[a-z0-9]{1,12}") {
        prop_assert_eq!(pseudonymize(&a, b"k1"), pseudonymize(&a, b"k1"));
        prop_assert_ne!(pseudonymize(&a, b"k1"), pseudonymize(&a, b"k2"));
        if a != b {
            prop_assert_ne!(pseudonymize(&a, b"k1"), pseudonymize(&b, b"k1"));
        }
    }

    #[test]
    fn reputation_moves_toward_input(rep in 0.0f64..=1.0, q in 0.0f64..=1.0, alpha in 0.0f64..=1.0) {
        let next = next_reputation(rep, q, alpha);
        prop_assert!((0.0..=1.0).contains(&next));
        prop_assert!((next - q).abs() <= (rep - q).abs() + 1e-12);
    }

    #[test]
    fn timeliness_is_monotone(a in 0i64..10_000, b in 0i64..10_000, life in 1i64..5_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (t_lo, t_hi) = (timeliness(lo, life), timeliness(hi, life));
        prop_assert!(t_hi <= t_lo);
        prop_assert!((0.0..=1.0).contains(&t_lo));
    }

    #[test]
    fn risk_is_order_free_noisy_or(
        sev in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 0..6),
        seed in any::<u64>(),
    ) {
        let mut threats: Vec<ThreatEntry> = sev
            .iter()
            .enumerate()
            .map(|(i, (s, hit))| ThreatEntry {
                id: format!("t{i}"),
                when: ThreatPredicate::One(Condition::eq("network", if *hit { "public_wifi" } else { "cellular" })),
                severity: *s,
            })
            .collect();
        let values: BTreeMap<String, String> = [("network".to_string(), "public_wifi".to_string())].into();
        let a = assess_risk("x", &values, &ThreatCatalog { threats: threats.clone() });
        let want = 1.0 - sev.iter().filter(|(_, h)| *h).map(|(s, _)| 1.0 - s).product::<f64>();
        prop_assert!((a.score - want).abs() < 1e-12);
        let k = (seed as usize) % threats.len().max(1);
        threats.rotate_left(k);
        threats.reverse();
        let b = assess_risk("x", &values, &ThreatCatalog { threats });
        prop_assert_eq!(a, b);
    }

    #[test]
    fn token_deny_reasons_follow_precedence(
        revoked in any::<bool>(),
        expiry in 0i64..20,
        now in 0i64..20,
        constraint in prop::sample::select(vec!["*", "at_*", "at_home", "walking_*"]),
        label in prop::sample::select(vec!["at_home", "at_work", "walking_near_home"]),
        op in prop::sample::select(vec!["read", "write"]),
    ) {
        let t = token(revoked, expiry, constraint, &["read"]);
        let want = if revoked {
            TokenDecision::Deny(DenyReason::Revoked)
        } else if now >= expiry {
            TokenDecision::Deny(DenyReason::Expired)
        } else if !wildcard(constraint.as_bytes(), label.as_bytes()) {
            TokenDecision::Deny(DenyReason::Context)
        } else if op != "read" {
            TokenDecision::Deny(DenyReason::Operation)
        } else {
            TokenDecision::Allow
        };
        prop_assert_eq!(decide(&t, label, op, now), want);
    }
}
