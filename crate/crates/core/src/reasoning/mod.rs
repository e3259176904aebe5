//! Context modelling and reasoning: key-value snapshots built from the CIB,
//! rule-based inference of high-level contexts, and the Context Base.

mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ingestion::{ContextInformationBase, LowLevelContext};
use crate::predicate::Condition;
use crate::qoc::{self, ConflictPolicy, QocSettings};
use crate::Millis;

pub use train::{train, TrainError, TrainingExample};

pub const UNKNOWN_LABEL: &str = "unknown";

/// One resolved entry per key at a point in time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextSnapshot {
    pub at: Millis,
    pub entries: BTreeMap<String, LowLevelContext>,
    pub completeness: f64,
}

impl ContextSnapshot {
    pub fn empty(at: Millis) -> Self {
        Self {
            at,
            entries: BTreeMap::new(),
            completeness: 0.0,
        }
    }

    /// Canonical string view of every entry, as seen by rule conditions.
    pub fn values(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.to_string()))
            .collect()
    }
}

/// Builds the snapshot at `t` over `required_keys`.
///
/// For each key the records in `[t - window, t]` (window = the key's conflict
/// window) from accepted sources are re-scored at `t` and reduced to one
/// entry: conflicting groups go through the key's conflict policy, agreeing
/// ones keep their newest record. Every entry's completeness is the fraction
/// of required keys present.
pub fn build_snapshot<R, S>(
    cib: &ContextInformationBase,
    t: Millis,
    required_keys: &[String],
    settings: &QocSettings,
    reputation: R,
    source_ok: S,
) -> ContextSnapshot
where
    R: Fn(&str) -> Option<f64>,
    S: Fn(&str) -> bool,
{
    let keys: BTreeSet<&String> = required_keys.iter().collect();
    let mut entries = BTreeMap::new();
    for key in &keys {
        let cfg = settings.for_key(key);
        let window = cfg.conflict_window_ms;
        let records: Vec<LowLevelContext> = cib
            .query(key, t.saturating_sub(window), t)
            .unwrap_or_default()
            .into_iter()
            .filter(|r| source_ok(&r.source))
            .map(|mut r| {
                let rep = reputation(&r.source).unwrap_or(r.qoc.reliability);
                r.qoc = qoc::score(&r, t, cfg.clone(), rep);
                r
            })
            .collect();
        if records.is_empty() {
            continue;
        }
        let policy = if qoc::detect_conflicts(&records, window).is_empty() {
            ConflictPolicy::UpToDateness
        } else {
            cfg.conflict_policy
        };
        entries.insert((*key).clone(), qoc::resolve(&records, policy));
    }
    let completeness = if keys.is_empty() {
        0.0
    } else {
        entries.len() as f64 / keys.len() as f64
    };
    for e in entries.values_mut() {
        e.qoc.completeness = completeness;
    }
    ContextSnapshot {
        at: t,
        entries,
        completeness,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighLevelContext {
    pub label: String,
    pub confidence: f64,
    pub contributing: BTreeSet<String>,
    pub derived_at: Millis,
}

impl HighLevelContext {
    pub fn unknown(at: Millis) -> Self {
        Self {
            label: UNKNOWN_LABEL.into(),
            confidence: 0.0,
            contributing: BTreeSet::new(),
            derived_at: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub label: String,
    pub confidence: f64,
    #[serde(default)]
    pub conditions: Vec<Condition>,
}

impl Rule {
    fn fires(&self, values: &BTreeMap<String, String>) -> bool {
        self.conditions
            .iter()
            .all(|c| c.holds(|k| values.get(k).map(String::as_str)))
    }

    fn keys(&self) -> BTreeSet<String> {
        self.conditions.iter().map(|c| c.key.clone()).collect()
    }
}

/// Ordered rule set. Rule files are a JSON list of rules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Classifier {
    pub rules: Vec<Rule>,
}

impl Classifier {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.rules.iter().map(|r| r.label.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Evaluates every rule. A firing rule scores `confidence × mean importance of
/// its condition keys` (1 for unconditional rules); the best score wins and
/// equal scores go to the lexicographically smallest label.
pub fn infer(snapshot: &ContextSnapshot, classifier: &Classifier) -> HighLevelContext {
    let values = snapshot.values();
    let mut best: Option<(f64, &Rule)> = None;
    for rule in &classifier.rules {
        if !rule.fires(&values) {
            continue;
        }
        let keys = rule.keys();
        let importance = if keys.is_empty() {
            1.0
        } else {
            keys.iter()
                .map(|k| snapshot.entries[k].qoc.importance)
                .sum::<f64>()
                / keys.len() as f64
        };
        let score = rule.confidence * importance;
        let better = match best {
            None => true,
            Some((s, r)) => score > s || (score == s && rule.label < r.label),
        };
        if better {
            best = Some((score, rule));
        }
    }
    match best {
        None => HighLevelContext::unknown(snapshot.at),
        Some((score, rule)) => HighLevelContext {
            label: rule.label.clone(),
            confidence: score.clamp(0.0, 1.0),
            contributing: rule.keys(),
            derived_at: snapshot.at,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitOutcome {
    Stored,
    Discarded,
}

/// Append-only store of accepted high-level contexts.
#[derive(Debug, Clone, Default)]
pub struct ContextBase {
    entries: Vec<HighLevelContext>,
}

impl ContextBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn commit_hlc(&mut self, hlc: HighLevelContext, accepted: bool) -> CommitOutcome {
        if accepted {
            self.entries.push(hlc);
            CommitOutcome::Stored
        } else {
            log::debug!(
                "discarding high-level context {} (confidence {})",
                hlc.label,
                hlc.confidence
            );
            CommitOutcome::Discarded
        }
    }

    pub fn current(&self) -> Option<&HighLevelContext> {
        self.entries.last()
    }

    pub fn entries(&self) -> &[HighLevelContext] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
