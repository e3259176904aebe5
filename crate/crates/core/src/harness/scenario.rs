//! Scenario documents: declarations plus a time-ordered event list.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dissemination::{PreferenceDelta, PreferenceSet, ThreatCatalog};
use crate::ingestion::{NormalizationTables, RawValue};
use crate::mechanisms::PresentedFactor;
use crate::policy::{ContextSecurityPolicy, OrderingConstraint};
use crate::predicate::LabelPattern;
use crate::qoc::{QocSettings, DEFAULT_VALIDATION_THRESHOLD};
use crate::reasoning::Rule;
use crate::trust::TrustConfig;
use crate::Millis;

const BOB: &str = include_str!("../../scenarios/bob.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_skew")]
    pub clock_skew_ms: Millis,
    #[serde(default = "default_threshold")]
    pub validation_threshold: f64,
    #[serde(default)]
    pub trust: TrustConfig,
    /// Keys gathered into inference snapshots.
    pub context_keys: Vec<String>,
    #[serde(default = "OrderingConstraint::defaults")]
    pub constraints: Vec<OrderingConstraint>,
    /// Address for `serve`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
}

fn default_skew() -> Millis {
    crate::ingestion::DEFAULT_CLOCK_SKEW_MS
}

fn default_threshold() -> f64 {
    DEFAULT_VALIDATION_THRESHOLD
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Credentials {
    #[serde(default)]
    pub knowledge: Option<String>,
    #[serde(default)]
    pub possession: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserDecl {
    pub id: String,
    #[serde(default)]
    pub credentials: Credentials,
    /// Key for pseudonyms; derived from the user id when absent.
    #[serde(default)]
    pub privacy_key: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    #[default]
    Sensor,
    Application,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDecl {
    pub id: String,
    pub owner: String,
    #[serde(default)]
    pub kind: DeviceKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub start: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum UserAction {
    PreferenceChange {
        delta: PreferenceDelta,
    },
    TokenGrant {
        alias: String,
        subject: String,
        resource: String,
        operations: BTreeSet<String>,
        constraint: LabelPattern,
        ttl_ms: Millis,
    },
    TokenRevoke {
        alias: String,
    },
    OwnershipTransfer {
        device: String,
        to: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventKind {
    /// Signed with the device key; the sequence is the next one unless given.
    DeviceReport {
        device: String,
        attribute: String,
        value: RawValue,
        #[serde(default)]
        observed_at: Option<Millis>,
        #[serde(default)]
        sequence: Option<u64>,
        /// Sign with a key that is not the device's.
        #[serde(default)]
        forge: bool,
    },
    UserAction {
        user: String,
        action: UserAction,
    },
    AppRequest {
        requester: String,
        user: String,
        attribute: String,
        /// Token alias from an earlier grant.
        #[serde(default)]
        token: Option<String>,
        #[serde(default)]
        factors: Vec<PresentedFactor>,
    },
    AdvanceClock {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub t: Millis,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub start: Millis,
    pub config: EngineConfig,
    #[serde(default)]
    pub users: Vec<UserDecl>,
    #[serde(default)]
    pub devices: Vec<DeviceDecl>,
    #[serde(default)]
    pub normalization: NormalizationTables,
    #[serde(default)]
    pub qoc: QocSettings,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub threats: ThreatCatalog,
    #[serde(default)]
    pub preferences: Vec<PreferenceSet>,
    #[serde(default)]
    pub policies: Vec<ContextSecurityPolicy>,
    #[serde(default)]
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

#[derive(Deserialize)]
struct EventPositions<'a> {
    #[serde(borrow, default)]
    events: Vec<&'a serde_json::value::RawValue>,
}

fn line_of(text: &str, fragment: &str) -> usize {
    let offset = (fragment.as_ptr() as usize).saturating_sub(text.as_ptr() as usize);
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Scenario {
    pub fn builtin(name: &str) -> Option<&'static str> {
        (name == "bob").then_some(BOB)
    }

    pub fn bob() -> Self {
        Self::parse(BOB).expect("the built-in scenario is valid")
    }

    /// Parses and checks a scenario; errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let positions: EventPositions = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let lines: Vec<usize> = positions.events.iter().map(|r| line_of(text, r.get())).collect();
        scenario.check(&lines)?;
        Ok(scenario)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    fn check(&self, lines: &[usize]) -> Result<(), HarnessError> {
        let line = |i: usize| lines.get(i).copied().unwrap_or(0);
        let users: BTreeSet<&str> = self.users.iter().map(|u| u.id.as_str()).collect();
        let devices: BTreeMap<&str, &DeviceDecl> = self.devices.iter().map(|d| (d.id.as_str(), d)).collect();
        if users.len() != self.users.len() {
            return Err(HarnessError::InvalidConfig("duplicate user id".into()));
        }
        if devices.len() != self.devices.len() {
            return Err(HarnessError::InvalidConfig("duplicate device id".into()));
        }
        let unresolved = |kind: &str, id: &str, line: usize| HarnessError::UnresolvedReference {
            kind: kind.to_string(),
            id: id.to_string(),
            line,
        };
        for d in &self.devices {
            if !users.contains(d.owner.as_str()) {
                return Err(unresolved("user", &d.owner, 0));
            }
        }
        for p in &self.preferences {
            if !users.contains(p.user_id.as_str()) {
                return Err(unresolved("user", &p.user_id, 0));
            }
        }
        let mut aliases = BTreeSet::new();
        let mut prev = self.start;
        for (i, e) in self.events.iter().enumerate() {
            if e.t < prev {
                return Err(HarnessError::Parse {
                    line: line(i),
                    column: 0,
                    message: format!("event at t={} precedes the previous event (t={prev})", e.t),
                });
            }
            prev = e.t;
            let user = |u: &str| {
                if users.contains(u) {
                    Ok(())
                } else {
                    Err(unresolved("user", u, line(i)))
                }
            };
            let device = |d: &str| {
                if devices.contains_key(d) {
                    Ok(())
                } else {
                    Err(unresolved("device", d, line(i)))
                }
            };
            match &e.kind {
                EventKind::DeviceReport { device: d, .. } => device(d)?,
                EventKind::UserAction { user: u, action } => {
                    user(u)?;
                    match action {
                        UserAction::PreferenceChange { .. } => {}
                        UserAction::TokenGrant { alias, subject, .. } => {
                            device(subject)?;
                            aliases.insert(alias.clone());
                        }
                        UserAction::TokenRevoke { alias } => {
                            if !aliases.contains(alias) {
                                return Err(unresolved("token", alias, line(i)));
                            }
                        }
                        UserAction::OwnershipTransfer { device: d, to } => {
                            device(d)?;
                            user(to)?;
                        }
                    }
                }
                EventKind::AppRequest {
                    requester,
                    user: u,
                    token,
                    ..
                } => {
                    device(requester)?;
                    user(u)?;
                    if let Some(alias) = token {
                        if !aliases.contains(alias) {
                            return Err(unresolved("token", alias, line(i)));
                        }
                    }
                }
                EventKind::AdvanceClock {} => {}
            }
        }
        let mut last = Millis::MIN;
        for p in &self.phases {
            if p.start < last {
                return Err(HarnessError::InvalidConfig(format!("phase {} starts before its predecessor", p.name)));
            }
            last = p.start;
        }
        Ok(())
    }

    /// Phase active at `t`, if any phase has started.
    pub fn phase_at(&self, t: Millis) -> Option<&str> {
        self.phases
            .iter()
            .rev()
            .find(|p| p.start <= t)
            .map(|p| p.name.as_str())
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }
}
