//! Context dissemination: enrich accepted high-level contexts with risk and
//! user preferences, then publish them to subscribers.

mod broker;
pub mod preferences;
pub mod risk;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoning::{ContextSnapshot, HighLevelContext};
use crate::Millis;

pub use broker::{Broker, Subscription};
pub use preferences::{PreferenceDelta, PreferenceEntry, PreferenceSet, PreferenceSlice, PreferenceStore};
pub use risk::{assess_risk, RiskAssessment, RiskLevel, ThreatCatalog, ThreatEntry};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DisseminationError {
    #[error("unknown user {0}")]
    UnknownUser(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntryRef {
    pub value: String,
    pub source: String,
}

/// The part of a snapshot an event carries downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub at: Millis,
    pub entries: BTreeMap<String, SnapshotEntryRef>,
}

impl From<&ContextSnapshot> for SnapshotRef {
    fn from(s: &ContextSnapshot) -> Self {
        Self {
            at: s.at,
            entries: s
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        SnapshotEntryRef {
                            value: e.value.to_string(),
                            source: e.source.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl SnapshotRef {
    pub fn values(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    /// Distinct devices that contributed entries, sorted.
    pub fn sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.values().map(|e| e.source.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub seq: u64,
    pub user_id: String,
    pub hlc: HighLevelContext,
    pub risk: RiskAssessment,
    pub preferences: PreferenceSlice,
    pub snapshot: SnapshotRef,
}

/// Assigns sequence numbers and fans events out through the broker.
#[derive(Debug, Default)]
pub struct Dispatcher {
    broker: Broker,
    last_seq: u64,
}

impl Dispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, pattern: crate::predicate::LabelPattern) -> Subscription {
        self.broker.subscribe(pattern)
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Risk assessment, preference lookup and publication as one stage.
    pub fn disseminate(
        &mut self,
        user_id: &str,
        hlc: &HighLevelContext,
        snapshot: &ContextSnapshot,
        catalog: &ThreatCatalog,
        prefs: &PreferenceStore,
    ) -> Result<ContextEvent, DisseminationError> {
        let snapshot = SnapshotRef::from(snapshot);
        let risk = assess_risk(&hlc.label, &snapshot.values(), catalog);
        let preferences = prefs.get_preferences(user_id, &hlc.label)?;
        Ok(self.publish(user_id, hlc.clone(), risk, preferences, snapshot))
    }

    /// Publishes a copy of `event` with fresh preferences and a new sequence number.
    pub fn republish(&mut self, event: &ContextEvent, prefs: &PreferenceStore) -> Result<ContextEvent, DisseminationError> {
        let preferences = prefs.get_preferences(&event.user_id, &event.hlc.label)?;
        Ok(self.publish(
            &event.user_id,
            event.hlc.clone(),
            event.risk.clone(),
            preferences,
            event.snapshot.clone(),
        ))
    }

    fn publish(
        &mut self,
        user_id: &str,
        hlc: HighLevelContext,
        risk: RiskAssessment,
        preferences: PreferenceSlice,
        snapshot: SnapshotRef,
    ) -> ContextEvent {
        self.last_seq += 1;
        let event = ContextEvent {
            seq: self.last_seq,
            user_id: user_id.to_string(),
            hlc,
            risk,
            preferences,
            snapshot,
        };
        self.broker.publish(&event);
        event
    }
}
