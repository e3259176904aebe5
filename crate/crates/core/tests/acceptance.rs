//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each;
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use caspaas_core::crypto::{self, KeyPair};
use caspaas_core::dissemination::{ContextEvent, PreferenceSlice, RiskAssessment, RiskLevel, SnapshotRef};
use caspaas_core::harness::{self, Scenario, Stage, TraceRecord};
use caspaas_core::ingestion::{ContextValue, LowLevelContext};
use caspaas_core::mechanisms::authorization::{check_token, grant_token, revoke_token};
use caspaas_core::mechanisms::{
    DenyReason, Envelope, MechanismError, Mechanisms, PrivacyTransform, TokenDecision, TokenRequest,
};
use caspaas_core::policy::{
    compose_plan, select_policy, ContextSecurityPolicy, MechanismAction, OrderingConstraint, PolicyMatch,
    PolicyStore, Release,
};
use caspaas_core::predicate::{Condition, LabelPattern};
use caspaas_core::qoc::{self, ConflictPolicy, KeyQoc, QoCVector};
use caspaas_core::reasoning::{infer, train, ContextSnapshot, HighLevelContext, TrainingExample};
use caspaas_core::trust::{self, LedgerBlock, LedgerEntry, TrustConfig, TrustLedger};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn records<'a>(trace: &'a [TraceRecord], stage: Stage) -> impl Iterator<Item = &'a TraceRecord> {
    trace.iter().filter(move |r| r.stage == stage)
}

// ---------------------------------------------------------------- walkthrough

fn bob_walkthrough() -> Outcome {
    let started = Instant::now();
    let out = harness::run(&Scenario::bob(), None).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();

    ensure(out.trace_jsonl() == golden("bob.trace.jsonl"), || {
        "trace differs from tests/golden/bob.trace.jsonl".into()
    })?;
    ensure(out.ledger_jsonl() == golden("bob.ledger.jsonl"), || {
        "ledger export differs from tests/golden/bob.ledger.jsonl".into()
    })?;

    let mut labels: Vec<String> = records(&out.trace, Stage::Publish)
        .map(|r| r.payload["label"].as_str().unwrap_or_default().to_string())
        .collect();
    labels.dedup();
    ensure(labels.len() == 3, || format!("published labels {labels:?}"))?;
    ensure(labels[0] == "at_home" || labels[0] == "unknown", || format!("first label {}", labels[0]))?;
    ensure(labels[1..] == ["walking_near_home", "at_public_garden"], || format!("labels {labels:?}"))?;

    let street = records(&out.trace, Stage::Infer)
        .find(|r| r.phase.as_deref() == Some("street") && r.outcome == "inferred")
        .ok_or("no inference in the street phase")?;
    let keys: BTreeSet<&str> = street.payload["snapshot"]
        .as_object()
        .ok_or("street snapshot missing")?
        .keys()
        .map(String::as_str)
        .collect();
    let expected: BTreeSet<&str> = ["location", "motion", "network", "time_of_day"].into();
    ensure(keys == expected, || format!("street snapshot keys {keys:?}"))?;

    ensure(elapsed < Duration::from_secs(5), || format!("runtime {elapsed:?}"))?;
    Ok(format!("labels {labels:?}, {} records, {elapsed:.2?}", out.trace.len()))
}

/// Enforcement-step records of the first request after the garden selection.
fn first_garden_enforcement(trace: &[TraceRecord]) -> Vec<&TraceRecord> {
    let start = trace
        .iter()
        .position(|r| r.stage == Stage::Plan && r.phase.as_deref() == Some("garden"))
        .expect("a plan in the garden phase");
    let mut steps = Vec::new();
    for r in &trace[start + 1..] {
        if r.stage != Stage::EnforceStep {
            break;
        }
        steps.push(r);
        if r.payload["step"] == "release" {
            break;
        }
    }
    steps
}

fn garden_enforcement() -> Outcome {
    let scenario = Scenario::bob();
    let out = harness::run(&scenario, None).map_err(|e| e.to_string())?;
    let garden = |r: &&TraceRecord| r.phase.as_deref() == Some("garden");

    let risk = records(&out.trace, Stage::Risk).find(garden).ok_or("no garden risk record")?;
    // Two matched threats of severity 0.5 combine as 1 - (1 - 0.5)(1 - 0.5).
    let expected_score = 1.0 - (1.0 - 0.5) * (1.0 - 0.5);
    let score = risk.payload["score"].as_f64().ok_or("risk score missing")?;
    ensure((score - expected_score).abs() < 1e-9, || format!("risk score {score}"))?;
    ensure(risk.payload["level"] == "high", || format!("risk level {}", risk.payload["level"]))?;

    let select = records(&out.trace, Stage::Select).find(garden).ok_or("no garden selection")?;
    let policy_id = select.payload["policy"].as_str().ok_or("policy id missing")?;
    let policy = scenario
        .policies
        .iter()
        .find(|p| p.id == policy_id)
        .ok_or_else(|| format!("selected policy {policy_id} not declared"))?;
    let kinds: BTreeSet<&str> = policy.actions.iter().map(MechanismAction::kind).collect();
    ensure(kinds.contains("establish_secure_channel"), || format!("{policy_id} lacks a channel action"))?;
    ensure(kinds.contains("apply_privacy"), || format!("{policy_id} lacks a privacy action"))?;
    let width = policy
        .actions
        .iter()
        .find_map(|a| match a {
            MechanismAction::ApplyPrivacy {
                attribute,
                transform: PrivacyTransform::Generalize { width },
            } if attribute == "glucose" => Some(*width),
            _ => None,
        })
        .ok_or("no glucose generalization in the policy")?;

    let steps = first_garden_enforcement(&out.trace);
    let pos = |name: &str| steps.iter().position(|r| r.payload["step"] == name);
    let channel = pos("establish_secure_channel").ok_or("no channel step")?;
    let release = pos("release").ok_or("no release step")?;
    ensure(channel < release, || "channel established after release".into())?;
    ensure(steps[channel].outcome == "ok", || "channel step failed".into())?;
    ensure(steps[release].outcome == "released", || format!("release {}", steps[release].outcome))?;

    let raw = records(&out.trace, Stage::Ingest)
        .filter(garden)
        .filter(|r| r.outcome == "accepted" && r.payload["attribute"] == "glucose")
        .filter_map(|r| r.payload["value"].as_f64())
        .last()
        .ok_or("no accepted garden glucose report")?;
    let released = steps[release].payload["value"].as_str().ok_or("released value missing")?;
    ensure(released != raw.to_string(), || "raw glucose released".into())?;
    let inner = released
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format!("{released} is not a bucket"))?;
    let (lo, hi) = inner.split_once(',').ok_or("bucket without comma")?;
    let (lo, hi): (f64, f64) = (lo.parse().map_err(|_| "bad lo")?, hi.parse().map_err(|_| "bad hi")?);
    let want_lo = (raw / width).floor() * width;
    ensure(lo == want_lo && hi == want_lo + width, || format!("bucket {released} for {raw}"))?;
    Ok(format!("risk {score} high, channel at {channel} < release at {release}, {raw} -> {released}"))
}

// ------------------------------------------------------------------------ qoc

fn llc(rng: &mut ChaCha8Rng) -> LowLevelContext {
    let values = ["home", "street", "garden"];
    let sources = ["s1", "s2", "s3", "s4"];
    let rels = [0.2, 0.5, 0.5, 0.9];
    LowLevelContext {
        key: "location".into(),
        value: ContextValue::Label(values[rng.gen_range(0..values.len())].into()),
        unit: None,
        observed_at: rng.gen_range(0..20),
        source: sources[rng.gen_range(0..sources.len())].into(),
        qoc: QoCVector {
            timeliness: 1.0,
            reliability: rels[rng.gen_range(0..rels.len())],
            completeness: 1.0,
            importance: 1.0,
        },
    }
}

fn qoc_suite() -> Outcome {
    for lifetime in [4, 1_000, 120_000, 3_600_000] {
        let cases = [(0, 1.0), (lifetime / 4, 0.75), (lifetime, 0.0), (2 * lifetime, 0.0)];
        for (age, want) in cases {
            let got = qoc::timeliness(age, lifetime);
            ensure((got - want).abs() < 1e-9, || format!("timeliness({age}, {lifetime}) = {got}"))?;
            let mut r = LowLevelContext {
                key: "k".into(),
                value: ContextValue::Number(1.0),
                unit: None,
                observed_at: 1_000_000,
                source: "s".into(),
                qoc: QoCVector::default(),
            };
            r.qoc = qoc::score(&r, 1_000_000 + age, KeyQoc { lifetime_ms: lifetime, ..KeyQoc::fallback("k") }, 0.5);
            ensure((r.qoc.timeliness - want).abs() < 1e-9, || format!("score timeliness at {age}"))?;
        }
    }

    let policies = [
        ConflictPolicy::UpToDateness,
        ConflictPolicy::HighestReliability,
        ConflictPolicy::WeightedVote,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1_000 {
        let n = rng.gen_range(1..=8);
        let group: Vec<LowLevelContext> = (0..n).map(|_| llc(&mut rng)).collect();
        let conflicts = qoc::detect_conflicts(&group, 10);
        for policy in policies {
            let base = qoc::resolve(&group, policy);
            ensure(group.contains(&base), || "resolution is not a group member".into())?;
            ensure(qoc::resolve(&group, policy) == base, || format!("{policy:?} not deterministic"))?;
            if policy == ConflictPolicy::UpToDateness {
                let newest = group.iter().map(|r| r.observed_at).max().unwrap();
                ensure(base.observed_at == newest, || "up-to-dateness missed the newest record".into())?;
            }
            for _ in 0..3 {
                let mut shuffled = group.clone();
                shuffled.shuffle(&mut rng);
                let other = qoc::resolve(&shuffled, policy);
                ensure(other == base, || format!("{policy:?} depends on input order: {group:?}"))?;
                ensure(qoc::detect_conflicts(&shuffled, 10) == conflicts, || "conflict detection order-dependent".into())?;
            }
        }
    }
    Ok("4 lifetimes x 4 ages exact; 1000 groups x 3 policies permutation-invariant".into())
}

// --------------------------------------------------------- policy selection

/// Reference wildcard matcher for patterns over `*` and `?` only.
fn wildcard(pattern: &[u8], text: &[u8]) -> bool {
    match (pattern.first(), text.first()) {
        (None, None) => true,
        (Some(b'*'), _) => wildcard(&pattern[1..], text) || (!text.is_empty() && wildcard(pattern, &text[1..])),
        (Some(b'?'), Some(_)) => wildcard(&pattern[1..], &text[1..]),
        (Some(p), Some(t)) if p == t => wildcard(&pattern[1..], &text[1..]),
        _ => false,
    }
}

struct PolicySpec {
    id: String,
    priority: i64,
    label: &'static str,
    risk: [f64; 2],
    matched: Option<&'static str>,
}

fn event(label: &str, risk: f64, matched: &str) -> ContextEvent {
    ContextEvent {
        seq: 1,
        user_id: "u".into(),
        hlc: HighLevelContext {
            label: label.into(),
            confidence: 1.0,
            contributing: BTreeSet::new(),
            derived_at: 0,
        },
        risk: RiskAssessment {
            score: risk,
            level: RiskLevel::from_score(risk),
            matched: BTreeSet::new(),
        },
        preferences: PreferenceSlice {
            user_id: "u".into(),
            matched: matched.into(),
            entry: Default::default(),
        },
        snapshot: SnapshotRef {
            at: 0,
            entries: BTreeMap::new(),
        },
    }
}

fn to_policy(s: &PolicySpec) -> ContextSecurityPolicy {
    ContextSecurityPolicy {
        id: s.id.clone(),
        priority: s.priority,
        matcher: PolicyMatch {
            label: LabelPattern::new(s.label).unwrap(),
            risk: s.risk,
            prefs: s.matched.map(|m| vec![Condition::eq("matched", m)]),
        },
        actions: vec![MechanismAction::NotifyUser { message: s.id.clone() }],
        release: Release::Permit,
        fail_closed: true,
    }
}

fn brute_force_select<'a>(specs: &'a [PolicySpec], label: &str, risk: f64, matched: &str) -> &'a str {
    let mut best: Option<(&PolicySpec, (usize, i64))> = None;
    for s in specs {
        let accepts = wildcard(s.label.as_bytes(), label.as_bytes())
            && s.risk[0] <= risk
            && risk <= s.risk[1]
            && s.matched.map_or(true, |m| m == matched);
        if !accepts {
            continue;
        }
        let spec = usize::from(s.label != "*") + usize::from(s.risk != [0.0, 1.0]) + usize::from(s.matched.is_some());
        let key = (spec, s.priority);
        let better = match &best {
            None => true,
            Some((b, bk)) => key > *bk || (key == *bk && s.id < b.id),
        };
        if better {
            best = Some((s, key));
        }
    }
    best.map_or("default", |(s, _)| s.id.as_str())
}

fn policy_selection_oracle() -> Outcome {
    let labels = ["at_home", "at_work", "at_public_garden", "walking_near_home", "unknown"];
    let patterns = [
        "*", "at_home", "at_work", "at_public_garden", "walking_near_home", "at_*", "*_home", "walking_*",
        "at_?ork", "*garden*", "unknown",
    ];
    let grid: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    let selectors = ["default", "at_*", "walking_*"];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut non_default = 0;
    for _ in 0..1_000 {
        let n = rng.gen_range(0..=100);
        let mut ids = BTreeSet::new();
        let mut specs = Vec::with_capacity(n);
        while specs.len() < n {
            let id = format!("p{}", rng.gen_range(0..1_000));
            if !ids.insert(id.clone()) {
                continue;
            }
            let risk = if rng.gen_bool(0.4) {
                [0.0, 1.0]
            } else {
                let a = grid[rng.gen_range(0..grid.len())];
                let b = grid[rng.gen_range(0..grid.len())];
                [a.min(b), a.max(b)]
            };
            specs.push(PolicySpec {
                id,
                priority: rng.gen_range(-2..=2),
                label: patterns[rng.gen_range(0..patterns.len())],
                risk,
                matched: rng.gen_bool(0.3).then(|| selectors[rng.gen_range(0..selectors.len())]),
            });
        }
        let mut store = PolicyStore::new();
        for s in &specs {
            store.add(to_policy(s)).map_err(|e| e.to_string())?;
        }
        let label = labels[rng.gen_range(0..labels.len())];
        let risk = if rng.gen_bool(0.5) {
            grid[rng.gen_range(0..grid.len())]
        } else {
            rng.gen_range(0.0..=1.0)
        };
        let matched = selectors[rng.gen_range(0..selectors.len())];
        let got = &select_policy(&event(label, risk, matched), &store).id;
        let want = brute_force_select(&specs, label, risk, matched);
        ensure(got == want, || format!("{label} risk {risk} prefs {matched}: got {got}, oracle {want}"))?;
        non_default += usize::from(want != "default");
    }
    Ok(format!("1000/1000 agree ({non_default} non-default selections)"))
}

// ------------------------------------------------------------- plan ordering

fn random_action(rng: &mut ChaCha8Rng) -> MechanismAction {
    match rng.gen_range(0..6) {
        0 => MechanismAction::Authenticate { factors: rng.gen_range(1..=2) },
        1 => MechanismAction::RenewSessionKey { target: format!("dev{}", rng.gen_range(0..3)) },
        2 => MechanismAction::EstablishSecureChannel {
            peers: ["dev0".into(), format!("app{}", rng.gen_range(0..2))],
        },
        3 => MechanismAction::ApplyPrivacy {
            attribute: format!("attr{}", rng.gen_range(0..3)),
            transform: PrivacyTransform::Suppress,
        },
        4 => MechanismAction::CheckToken {
            token: format!("tok{}", rng.gen_range(0..2)),
            operation: "read".into(),
        },
        _ => MechanismAction::NotifyUser { message: format!("note {}", rng.gen_range(0..3)) },
    }
}

fn satisfies(kinds: &[&str], constraints: &[OrderingConstraint]) -> bool {
    kinds.iter().enumerate().all(|(i, a)| {
        kinds[i + 1..]
            .iter()
            .all(|b| !constraints.iter().any(|c| c.before == *b && c.after == *a))
    })
}

/// Lexicographically smallest index permutation satisfying the constraints.
fn brute_force_order(kinds: &[&str], constraints: &[OrderingConstraint]) -> Option<Vec<usize>> {
    fn extend(
        prefix: &mut Vec<usize>,
        used: &mut Vec<bool>,
        kinds: &[&str],
        constraints: &[OrderingConstraint],
    ) -> bool {
        if prefix.len() == kinds.len() {
            let ordered: Vec<&str> = prefix.iter().map(|&i| kinds[i]).collect();
            return satisfies(&ordered, constraints);
        }
        for i in 0..kinds.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            prefix.push(i);
            if extend(prefix, used, kinds, constraints) {
                return true;
            }
            prefix.pop();
            used[i] = false;
        }
        false
    }
    let mut prefix = Vec::new();
    let mut used = vec![false; kinds.len()];
    extend(&mut prefix, &mut used, kinds, constraints).then_some(prefix)
}

fn plan_ordering() -> Outcome {
    let constraints = OrderingConstraint::defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ev = event("at_public_garden", 0.75, "default");
    let mut violations = 0;
    for _ in 0..1_000 {
        let n = rng.gen_range(1..=7);
        let actions: Vec<MechanismAction> = (0..n).map(|_| random_action(&mut rng)).collect();
        let policy = ContextSecurityPolicy {
            id: "p".into(),
            priority: 0,
            matcher: PolicyMatch::default(),
            actions: actions.clone(),
            release: Release::Permit,
            fail_closed: true,
        };
        let plan = compose_plan(&policy, &ev, &constraints).map_err(|e| e.to_string())?;
        let got: Vec<MechanismAction> = plan.steps.iter().map(|s| s.action.clone()).collect();
        let kinds: Vec<&str> = got.iter().map(MechanismAction::kind).collect();
        if !satisfies(&kinds, &constraints) {
            violations += 1;
        }
        let input_kinds: Vec<&str> = actions.iter().map(MechanismAction::kind).collect();
        let order = brute_force_order(&input_kinds, &constraints).ok_or("oracle found no order")?;
        let want: Vec<MechanismAction> = order.iter().map(|&i| actions[i].clone()).collect();
        ensure(got == want, || format!("plan {kinds:?} differs from oracle for {input_kinds:?}"))?;
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok("1000 plans, 0 violations, all equal to the brute-force order".into())
}

// ------------------------------------------------------------ ledger tamper

fn two_hundred_blocks() -> TrustLedger {
    let config = TrustConfig {
        checkpoint_every: 7,
        ..TrustConfig::default()
    };
    let mut l = TrustLedger::new(config, 0);
    let owners: Vec<(String, KeyPair)> = (0..3)
        .map(|i| (format!("owner{i}"), KeyPair::derive(&format!("owner{i}"))))
        .collect();
    for (id, k) in &owners {
        l.register_owner(id, k.public());
    }
    let mut t = 1;
    let mut devices: Vec<(String, usize)> = Vec::new();
    let mut tokens = Vec::new();
    let mut step = 0u64;
    while l.blocks().len() < 200 {
        t += 13;
        step += 1;
        match step % 5 {
            0 | 1 if devices.len() < 40 => {
                let id = format!("dev{}", devices.len());
                let owner = devices.len() % owners.len();
                l.register_device(&id, &owners[owner].0, KeyPair::derive(&id).public(), t)
                    .unwrap();
                devices.push((id, owner));
            }
            2 => {
                let req = TokenRequest {
                    token_id: None,
                    subject: format!("app{step}"),
                    resource: format!("user/attr{step}"),
                    operations: ["read".to_string(), "write".to_string()].into(),
                    constraint: LabelPattern::new("at_*").unwrap(),
                    expiry: t + 1_000,
                };
                tokens.push(grant_token(&mut l, &req, t).unwrap().token_id);
            }
            3 if !tokens.is_empty() => {
                let id = tokens.remove(0);
                revoke_token(&mut l, &id, t).unwrap();
            }
            4 if !devices.is_empty() => {
                let i = (step as usize / 5) % devices.len();
                let (dev, owner) = devices[i].clone();
                let to = (owner + 1) % owners.len();
                let transfers = l.device(&dev).unwrap().transfers;
                let sig = owners[owner].1.sign(&trust::transfer_message(&dev, &owners[to].0, transfers));
                l.transfer_ownership(&dev, &owners[to].0, &sig, t).unwrap();
                devices[i].1 = to;
            }
            _ => {
                if let Some((dev, _)) = devices.first() {
                    let dev = dev.clone();
                    l.update_reputation(&dev, 0.8, t).unwrap();
                }
            }
        }
    }
    l
}

/// Changes one JSON leaf (the first one, depth first) so the value differs.
fn mutate_leaf(v: &mut Value) {
    match v {
        Value::String(s) => match crypto::b64_decode(s) {
            Ok(mut bytes) if !bytes.is_empty() && s.len() >= 40 => {
                bytes[0] ^= 1;
                *s = crypto::b64_encode(&bytes);
            }
            _ => s.push('~'),
        },
        Value::Number(n) => {
            *v = match n.as_i64() {
                Some(i) => Value::from(i + 1),
                None => Value::from(n.as_f64().unwrap() + 0.125),
            }
        }
        Value::Array(items) => match items.first_mut() {
            Some(first) => mutate_leaf(first),
            None => items.push(Value::from("x")),
        },
        Value::Object(map) => match map.values_mut().next() {
            Some(first) => mutate_leaf(first),
            None => {
                map.insert("x".into(), Value::from(0.5));
            }
        },
        Value::Bool(b) => *b = !*b,
        Value::Null => *v = Value::from(0),
    }
}

/// Every single-field mutation of a block: header fields plus each entry field.
fn block_mutations(b: &LedgerBlock) -> Vec<LedgerBlock> {
    let mut out = Vec::new();
    let mut m = b.clone();
    m.index += 1;
    out.push(m);
    let mut m = b.clone();
    m.prev_hash[31] ^= 0x01;
    out.push(m);
    let mut m = b.clone();
    m.timestamp += 1;
    out.push(m);
    let mut m = b.clone();
    m.hash[0] ^= 0x80;
    out.push(m);
    let entry = serde_json::to_value(&b.entry).unwrap();
    for key in entry.as_object().unwrap().keys().filter(|k| *k != "kind") {
        let mut e = entry.clone();
        if key == "public_key" {
            // A flipped byte is usually not a valid curve point; swap in another key.
            e[key.as_str()] = Value::from(KeyPair::derive("tamper").public().to_base64());
        } else {
            mutate_leaf(&mut e[key.as_str()]);
        }
        let mut m = b.clone();
        m.entry = serde_json::from_value::<LedgerEntry>(e).unwrap();
        assert_ne!(m.entry, b.entry, "mutation of {key} was a no-op");
        out.push(m);
    }
    out
}

fn ledger_tamper() -> Outcome {
    let started = Instant::now();
    let ledger = two_hundred_blocks();
    let blocks = ledger.blocks().to_vec();
    ensure(blocks.len() == 200, || format!("{} blocks", blocks.len()))?;
    ensure(trust::verify_chain(&blocks), || "untouched ledger does not verify".into())?;
    let kinds: BTreeSet<&str> = blocks.iter().map(|b| b.entry.kind()).collect();
    let mut count = 0;
    let mut work = blocks.clone();
    for i in 0..blocks.len() {
        for m in block_mutations(&blocks[i]) {
            work[i] = m;
            ensure(!trust::verify_chain(&work), || format!("mutation of block {i} undetected"))?;
            count += 1;
        }
        work[i] = blocks[i].clone();
    }
    ensure(trust::verify_chain(&work), || "restored ledger does not verify".into())?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("runtime {elapsed:?}"))?;
    Ok(format!("{count} mutations over {} entry kinds all detected, {elapsed:.2?}", kinds.len()))
}

// ----------------------------------------------------------------- reputation

fn reputation_convergence() -> Outcome {
    let mut l = TrustLedger::new(TrustConfig::default(), 0);
    l.register_owner("o", KeyPair::derive("o").public());
    l.register_device("d", "o", KeyPair::derive("d").public(), 0)
        .map_err(|e| e.to_string())?;
    let (r0, alpha) = (0.5f64, 0.1f64);
    let mut rep = r0;
    for n in 1..=50 {
        rep = l.update_reputation("d", 1.0, n).map_err(|e| e.to_string())?;
        // Closed form of the recurrence with constant input 1.
        let want = 1.0 - (1.0 - r0) * (1.0 - alpha).powi(n as i32);
        ensure((rep - want).abs() < 1e-9, || format!("step {n}: {rep} vs {want}"))?;
    }
    ensure(rep >= 0.995, || format!("reputation after 50 updates {rep}"))?;
    Ok(format!("reputation after 50 updates {rep:.6}"))
}

// --------------------------------------------------------------------- crypto

fn channel_setup() -> (TrustLedger, Mechanisms, String) {
    let mut l = TrustLedger::new(TrustConfig::default(), 0);
    let mut m = Mechanisms::new(5);
    l.register_owner("o", KeyPair::derive("o").public());
    for id in ["watch", "clinic"] {
        let k = KeyPair::derive(id);
        l.register_device(id, "o", k.public(), 0).unwrap();
        m.add_identity(id, k);
    }
    let ch = m.establish_channel(&l, "watch", "clinic", 0).unwrap();
    (l, m, ch)
}

fn flip(bytes: &mut [u8], bit: usize) {
    bytes[bit / 8] ^= 1 << (bit % 8);
}

fn crypto_envelope() -> Outcome {
    let (_, mut m, ch) = channel_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..1_000 {
        let len = match i {
            0 => 0,
            1 => 1,
            2 => 64 * 1024,
            _ => rng.gen_range(0..=64 * 1024),
        };
        let mut payload = vec![0u8; len];
        rng.fill(payload.as_mut_slice());
        let aad: Vec<u8> = (0..rng.gen_range(0..32)).map(|_| rng.gen()).collect();
        let env = m.seal(&ch, &payload, &aad).map_err(|e| e.to_string())?;
        let back = m.unseal(&ch, &env).map_err(|e| e.to_string())?;
        ensure(back == payload, || format!("payload {i} ({len} bytes) changed"))?;
    }

    let (_, mut m, ch) = channel_setup();
    let env = m.seal(&ch, b"glucose=142 mg/dL", b"bob/glucose").unwrap();
    let fields = ["channel_id", "epoch", "nonce", "ct", "tag", "aad"];
    let mut rejected = 0;
    for field in fields {
        for _ in 0..100 {
            let mut bad: Envelope = env.clone();
            match field {
                "channel_id" => {
                    let mut b = bad.channel_id.into_bytes();
                    let pos = rng.gen_range(0..b.len());
                    b[pos] ^= 1 << rng.gen_range(0..7);
                    bad.channel_id = String::from_utf8(b).unwrap();
                }
                "epoch" => bad.epoch ^= 1 << rng.gen_range(0..64),
                "nonce" => flip(&mut bad.nonce, rng.gen_range(0..96)),
                "ct" => {
                    let bits = bad.ct.len() * 8;
                    flip(&mut bad.ct, rng.gen_range(0..bits))
                }
                "tag" => flip(&mut bad.tag, rng.gen_range(0..128)),
                _ => {
                    let bits = bad.aad.len() * 8;
                    flip(&mut bad.aad, rng.gen_range(0..bits))
                }
            }
            match m.unseal(&ch, &bad) {
                Err(MechanismError::TamperDetected | MechanismError::StaleEpoch { .. }) => rejected += 1,
                other => return Err(format!("{field} bit flip accepted: {other:?}")),
            }
        }
    }
    ensure(m.unseal(&ch, &env).is_ok(), || "original rejected after tamper attempts".into())?;

    let (_, mut m, ch) = channel_setup();
    let mut nonces = HashSet::new();
    for i in 0..10_000u32 {
        let env = m.seal(&ch, &i.to_be_bytes(), b"").unwrap();
        ensure(nonces.insert((env.epoch, env.nonce.clone())), || format!("nonce reused at message {i}"))?;
        ensure(m.unseal(&ch, &env).is_ok(), || format!("message {i} rejected"))?;
    }
    Ok(format!("1000 round trips; {rejected}/600 bit flips rejected; 10000 distinct nonces"))
}

// ----------------------------------------------------------------- revocation

fn revocation_immediacy() -> Outcome {
    let mut checks = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let mut l = TrustLedger::new(TrustConfig::default(), 0);
        l.register_owner("o", KeyPair::derive("o").public());
        let mut t = 10;
        let target = TokenRequest {
            token_id: Some("target".into()),
            subject: "clinic".into(),
            resource: "bob/glucose".into(),
            operations: ["read".to_string()].into(),
            constraint: LabelPattern::any(),
            expiry: 1_000_000,
        };
        grant_token(&mut l, &target, t).map_err(|e| e.to_string())?;
        let check = |l: &TrustLedger, t| check_token(l, "target", "at_home", "read", t).unwrap();
        ensure(check(&l, t) == TokenDecision::Allow, || format!("seed {seed}: fresh grant denied"))?;

        let total = rng.gen_range(2..30);
        let revoke_at = rng.gen_range(0..total);
        let mut others: Vec<String> = Vec::new();
        let mut revoked = false;
        for i in 0..total {
            t += rng.gen_range(1..50);
            if i == revoke_at {
                revoke_token(&mut l, "target", t).map_err(|e| e.to_string())?;
                revoked = true;
            } else {
                match rng.gen_range(0..5) {
                    0 => {
                        let id = format!("other{i}");
                        let mut req = target.clone();
                        req.token_id = Some(id.clone());
                        grant_token(&mut l, &req, t).map_err(|e| e.to_string())?;
                        others.push(id);
                    }
                    1 if !others.is_empty() => {
                        let id = others.swap_remove(rng.gen_range(0..others.len()));
                        revoke_token(&mut l, &id, t).map_err(|e| e.to_string())?;
                    }
                    2 => {
                        let id = format!("dev{i}");
                        l.register_device(&id, "o", KeyPair::derive(&id).public(), t)
                            .map_err(|e| e.to_string())?;
                    }
                    3 if !others.is_empty() => {
                        let id = &others[rng.gen_range(0..others.len())];
                        check_token(&l, id, "at_home", "read", t).map_err(|e| e.to_string())?;
                    }
                    _ => {}
                }
            }
            // Independent fold over the raw ledger entries.
            let oracle_revoked = l
                .blocks()
                .iter()
                .any(|b| matches!(&b.entry, LedgerEntry::TokenRevoke { token_id } if token_id == "target"));
            let want = if revoked {
                TokenDecision::Deny(DenyReason::Revoked)
            } else {
                TokenDecision::Allow
            };
            ensure(oracle_revoked == revoked, || format!("seed {seed}: ledger fold disagrees"))?;
            let got = check(&l, t);
            ensure(got == want, || format!("seed {seed} op {i}: {got:?}, expected {want:?}"))?;
            checks += 1;
        }
    }
    Ok(format!("100 interleavings, {checks} checks consistent with revocation point"))
}

// ---------------------------------------------------------------- determinism

fn determinism() -> Outcome {
    let bob = Scenario::bob();
    let mut noisy = bob.clone();
    for p in &mut noisy.policies {
        for a in &mut p.actions {
            if let MechanismAction::ApplyPrivacy { transform, .. } = a {
                *transform = PrivacyTransform::Noise { bound: 5.0 };
            }
        }
    }
    noisy.name = "bob-noisy".into();
    let mut cases = 0;
    for (scenario, seed) in [(&bob, None), (&bob, Some(42)), (&noisy, Some(42)), (&noisy, Some(7))] {
        let a = harness::run(scenario, seed).map_err(|e| e.to_string())?;
        let b = harness::run(scenario, seed).map_err(|e| e.to_string())?;
        ensure(a.trace_jsonl() == b.trace_jsonl(), || format!("{} seed {seed:?}: traces differ", scenario.name))?;
        ensure(a.ledger_jsonl() == b.ledger_jsonl(), || format!("{} seed {seed:?}: ledgers differ", scenario.name))?;
        cases += 1;
    }
    Ok(format!("{cases} (scenario, seed) pairs byte-identical across runs"))
}

// ----------------------------------------------------------------- classifier

fn example(location: &str, motion: &str, network: &str, label: &str) -> TrainingExample {
    TrainingExample {
        entries: [("location", location), ("motion", motion), ("network", network)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        label: label.into(),
    }
}

fn snapshot(entries: &BTreeMap<String, String>) -> ContextSnapshot {
    ContextSnapshot {
        at: 0,
        entries: entries
            .iter()
            .map(|(k, v)| {
                let llc = LowLevelContext {
                    key: k.clone(),
                    value: ContextValue::Label(v.clone()),
                    unit: None,
                    observed_at: 0,
                    source: "s".into(),
                    qoc: QoCVector {
                        timeliness: 1.0,
                        reliability: 1.0,
                        completeness: 1.0,
                        importance: 1.0,
                    },
                };
                (k.clone(), llc)
            })
            .collect(),
        completeness: 1.0,
    }
}

fn classifier() -> Outcome {
    let set = [
        example("home", "still", "home_wifi", "at_home"),
        example("home", "walking", "home_wifi", "at_home"),
        example("near_home", "walking", "cellular", "walking_near_home"),
        example("near_home", "still", "cellular", "outside_home"),
        example("garden", "still", "public_wifi", "at_public_garden"),
        example("garden", "walking", "public_wifi", "at_public_garden"),
        example("office", "still", "corp_wifi", "at_work"),
        example("office", "walking", "cellular", "at_work"),
    ];
    let c = train(&set).map_err(|e| e.to_string())?;
    let correct = set
        .iter()
        .filter(|e| infer(&snapshot(&e.entries), &c).label == e.label)
        .count();
    ensure(correct == set.len(), || format!("training accuracy {correct}/{}", set.len()))?;

    let entries = [("location".to_string(), "home".to_string())].into();
    let pair = [
        TrainingExample { entries: BTreeMap::clone(&entries), label: "zzz".into() },
        TrainingExample { entries, label: "aaa".into() },
    ];
    let c = train(&pair).map_err(|e| e.to_string())?;
    ensure(c.rules.len() == 1, || format!("{} rules for the contradictory pair", c.rules.len()))?;
    ensure(c.rules[0].label == "aaa", || format!("majority tie went to {}", c.rules[0].label))?;
    ensure((c.rules[0].confidence - 0.5).abs() < 1e-12, || format!("confidence {}", c.rules[0].confidence))?;

    // Two attributes with equal gain: the smaller name is split on.
    let gain_tie = [
        TrainingExample { entries: [("b".into(), "x".into()), ("a".into(), "p".into())].into(), label: "one".into() },
        TrainingExample { entries: [("b".into(), "y".into()), ("a".into(), "q".into())].into(), label: "two".into() },
    ];
    let c = train(&gain_tie).map_err(|e| e.to_string())?;
    ensure(c.rules.iter().all(|r| r.conditions.iter().all(|k| k.key == "a")), || {
        "equal-gain split did not take the smaller attribute".into()
    })?;
    Ok(format!("8/8 training accuracy; contradictory pair -> aaa @ 0.5; gain tie -> a"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("bob walkthrough", bob_walkthrough),
        ("garden enforcement", garden_enforcement),
        ("qoc suite", qoc_suite),
        ("policy selection oracle", policy_selection_oracle),
        ("plan ordering", plan_ordering),
        ("ledger tamper evidence", ledger_tamper),
        ("reputation convergence", reputation_convergence),
        ("crypto envelope", crypto_envelope),
        ("revocation immediacy", revocation_immediacy),
        ("determinism", determinism),
        ("classifier", classifier),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed();
        match result {
            Ok(detail) => println!("PASS  {name:<26} {detail} [{elapsed:.2?}]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name:<26} {reason} [{elapsed:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
