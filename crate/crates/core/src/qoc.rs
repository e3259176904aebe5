//! Quality of Context: per-record quality vectors, conflict detection and
//! resolution, and validation of inferred high-level contexts.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ingestion::LowLevelContext;
use crate::reasoning::HighLevelContext;
use crate::Millis;

pub const DEFAULT_CONFLICT_WINDOW_MS: Millis = 10_000;
pub const DEFAULT_VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoCVector {
    pub timeliness: f64,
    pub reliability: f64,
    pub completeness: f64,
    pub importance: f64,
}

impl Default for QoCVector {
    fn default() -> Self {
        Self {
            timeliness: 0.0,
            reliability: 0.0,
            completeness: 1.0,
            importance: 0.0,
        }
    }
}

impl QoCVector {
    /// Unweighted mean of the four components.
    pub fn mean(&self) -> f64 {
        (self.timeliness + self.reliability + self.completeness + self.importance) / 4.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    #[default]
    UpToDateness,
    HighestReliability,
    WeightedVote,
}

/// Quality configuration of one attribute key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyQoc {
    pub key: String,
    pub lifetime_ms: Millis,
    pub importance: f64,
    #[serde(default)]
    pub conflict_policy: ConflictPolicy,
    #[serde(default = "default_window")]
    pub conflict_window_ms: Millis,
}

fn default_window() -> Millis {
    DEFAULT_CONFLICT_WINDOW_MS
}

impl KeyQoc {
    pub fn fallback(key: &str) -> Self {
        Self {
            key: key.to_string(),
            lifetime_ms: 60_000,
            importance: 0.5,
            conflict_policy: ConflictPolicy::UpToDateness,
            conflict_window_ms: DEFAULT_CONFLICT_WINDOW_MS,
        }
    }
}

/// Per-key settings; keys without an entry use [`KeyQoc::fallback`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<KeyQoc>", into = "Vec<KeyQoc>")]
pub struct QocSettings {
    keys: BTreeMap<String, KeyQoc>,
}

impl From<Vec<KeyQoc>> for QocSettings {
    fn from(v: Vec<KeyQoc>) -> Self {
        Self {
            keys: v.into_iter().map(|k| (k.key.clone(), k)).collect(),
        }
    }
}

impl From<QocSettings> for Vec<KeyQoc> {
    fn from(s: QocSettings) -> Self {
        s.keys.into_values().collect()
    }
}

impl QocSettings {
    pub fn for_key(&self, key: &str) -> KeyQoc {
        self.keys
            .get(key)
            .cloned()
            .unwrap_or_else(|| KeyQoc::fallback(key))
    }

    pub fn validate(&self) -> Result<(), String> {
        for k in self.keys.values() {
            if k.lifetime_ms <= 0 {
                return Err(format!("{}: lifetime_ms must be positive", k.key));
            }
            if !(0.0..=1.0).contains(&k.importance) {
                return Err(format!("{}: importance must lie in [0, 1]", k.key));
            }
            if k.conflict_window_ms < 0 {
                return Err(format!("{}: conflict_window_ms must be non-negative", k.key));
            }
        }
        Ok(())
    }
}

/// `timeliness = max(0, 1 - age / lifetime)`, clamped to 1 for reports
/// stamped slightly in the future.
pub fn timeliness(age_ms: Millis, lifetime_ms: Millis) -> f64 {
    debug_assert!(lifetime_ms > 0);
    (1.0 - age_ms as f64 / lifetime_ms as f64).clamp(0.0, 1.0)
}

pub fn score(llc: &LowLevelContext, now: Millis, key: KeyQoc, source_reputation: f64) -> QoCVector {
    QoCVector {
        timeliness: timeliness(now - llc.observed_at, key.lifetime_ms),
        reliability: source_reputation.clamp(0.0, 1.0),
        completeness: 1.0,
        importance: key.importance.clamp(0.0, 1.0),
    }
}

/// Records of one key that overlap in time and disagree on value.
#[derive(Debug, Clone, PartialEq)]
pub struct Conflict {
    pub records: Vec<LowLevelContext>,
}

/// Groups records by single-linkage in time (consecutive gaps ≤ `window_ms`)
/// and reports every group holding more than one distinct value.
pub fn detect_conflicts(records: &[LowLevelContext], window_ms: Millis) -> Vec<Conflict> {
    let mut sorted: Vec<&LowLevelContext> = records.iter().collect();
    sorted.sort_by(|a, b| a.observed_at.cmp(&b.observed_at).then_with(|| tie_order(a, b)));

    let mut out = Vec::new();
    let mut group: Vec<&LowLevelContext> = Vec::new();
    let mut flush = |group: &mut Vec<&LowLevelContext>| {
        let first = group.first().map(|r| r.value.to_string());
        if group.iter().any(|r| Some(r.value.to_string()) != first) {
            out.push(Conflict {
                records: group.iter().map(|r| (*r).clone()).collect(),
            });
        }
        group.clear();
    };
    for r in sorted {
        if let Some(last) = group.last() {
            if r.observed_at - last.observed_at > window_ms {
                flush(&mut group);
            }
        }
        group.push(r);
    }
    flush(&mut group);
    out
}

/// Total preference order used for every tie: newest first, then source,
/// then value, then reliability.
fn tie_order(a: &LowLevelContext, b: &LowLevelContext) -> Ordering {
    b.observed_at
        .cmp(&a.observed_at)
        .then_with(|| a.source.cmp(&b.source))
        .then_with(|| a.value.to_string().cmp(&b.value.to_string()))
        .then_with(|| b.qoc.reliability.total_cmp(&a.qoc.reliability))
        .then_with(|| b.qoc.timeliness.total_cmp(&a.qoc.timeliness))
}

fn by_reliability(a: &LowLevelContext, b: &LowLevelContext) -> Ordering {
    b.qoc
        .reliability
        .total_cmp(&a.qoc.reliability)
        .then_with(|| tie_order(a, b))
}

/// Picks one record of the group. The result is independent of input order.
///
/// # Panics
/// Panics on an empty group.
pub fn resolve(records: &[LowLevelContext], policy: ConflictPolicy) -> LowLevelContext {
    assert!(!records.is_empty(), "cannot resolve an empty conflict group");
    let mut sorted: Vec<&LowLevelContext> = records.iter().collect();
    sorted.sort_by(|a, b| tie_order(a, b));
    match policy {
        ConflictPolicy::UpToDateness => sorted[0].clone(),
        ConflictPolicy::HighestReliability => {
            sorted.sort_by(|a, b| by_reliability(a, b));
            sorted[0].clone()
        }
        ConflictPolicy::WeightedVote => {
            // Summing in canonical order keeps float totals order-independent.
            let mut tally: BTreeMap<String, (f64, &LowLevelContext)> = BTreeMap::new();
            for r in sorted.iter().copied() {
                let entry = tally.entry(r.value.to_string()).or_insert((0.0, r));
                entry.0 += r.qoc.reliability;
                if by_reliability(r, entry.1) == Ordering::Less {
                    entry.1 = r;
                }
            }
            let (_, best) = tally
                .into_values()
                .min_by(|(sa, ra), (sb, rb)| sb.total_cmp(sa).then_with(|| tie_order(ra, rb)))
                .expect("non-empty group");
            best.clone()
        }
    }
}

/// `confidence × mean over records of each record's QoC mean`; an empty
/// list scores zero.
pub fn validation_score(confidence: f64, contributing: &[QoCVector]) -> f64 {
    if contributing.is_empty() {
        return 0.0;
    }
    let mean = contributing.iter().map(QoCVector::mean).sum::<f64>() / contributing.len() as f64;
    confidence * mean
}

pub fn validate_hlc(hlc: &HighLevelContext, contributing: &[QoCVector], threshold: f64) -> bool {
    validation_score(hlc.confidence, contributing) >= threshold
}
