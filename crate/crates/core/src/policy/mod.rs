//! Contextual security policies: storage and linting, selection against
//! context events, plan composition and enforcement.

mod enforce;
mod plan;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dissemination::{ContextEvent, PreferenceSlice};
use crate::mechanisms::PrivacyTransform;
use crate::predicate::{Condition, LabelPattern};

pub use enforce::{enforce, AccessRequest, EnforceContext, EnforcementTrace, StepOutcome, StepRecord};
pub use plan::{compose_plan, stable_order, EnforcementPlan, OrderingConstraint, PlanError, PlanStep, StepOrigin};

/// Id of the mandatory fallback policy.
pub const DEFAULT_POLICY_ID: &str = "default";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum MechanismAction {
    Authenticate {
        factors: u8,
    },
    /// `target` is a device id or `@sources` (every device behind the event).
    RenewSessionKey {
        target: String,
    },
    /// Peers may be device ids or `@resource_source` / `@requester`.
    EstablishSecureChannel {
        peers: [String; 2],
    },
    ApplyPrivacy {
        attribute: String,
        transform: PrivacyTransform,
    },
    /// `token` is a token id or `@request` (the token the requester presents).
    CheckToken {
        token: String,
        #[serde(default = "default_operation")]
        operation: String,
    },
    /// `{label}` and `{risk}` in the message are filled from the event.
    NotifyUser {
        message: String,
    },
}

fn default_operation() -> String {
    "read".into()
}

pub const ACTION_KINDS: [&str; 6] = [
    "authenticate",
    "renew_session_key",
    "establish_secure_channel",
    "apply_privacy",
    "check_token",
    "notify_user",
];

impl MechanismAction {
    pub fn kind(&self) -> &'static str {
        match self {
            MechanismAction::Authenticate { .. } => "authenticate",
            MechanismAction::RenewSessionKey { .. } => "renew_session_key",
            MechanismAction::EstablishSecureChannel { .. } => "establish_secure_channel",
            MechanismAction::ApplyPrivacy { .. } => "apply_privacy",
            MechanismAction::CheckToken { .. } => "check_token",
            MechanismAction::NotifyUser { .. } => "notify_user",
        }
    }

    fn check_params(&self) -> Result<(), String> {
        let blank = |s: &str| s.trim().is_empty();
        match self {
            MechanismAction::Authenticate { factors } if !(1..=2).contains(factors) => {
                Err(format!("factors must be 1 or 2, got {factors}"))
            }
            MechanismAction::RenewSessionKey { target } if blank(target) => Err("empty target".into()),
            MechanismAction::EstablishSecureChannel { peers } if peers.iter().any(|p| blank(p)) => {
                Err("empty peer".into())
            }
            MechanismAction::ApplyPrivacy { attribute, .. } if blank(attribute) => {
                Err("empty attribute".into())
            }
            MechanismAction::ApplyPrivacy { transform, .. } => {
                transform.validate().map_err(|e| e.to_string())
            }
            MechanismAction::CheckToken { token, operation } if blank(token) || blank(operation) => {
                Err("empty token reference or operation".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Release {
    #[default]
    Permit,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMatch {
    #[serde(default)]
    pub label: LabelPattern,
    /// Inclusive `[min, max]` on the risk score.
    #[serde(default = "full_range")]
    pub risk: [f64; 2],
    /// Conditions over the event's preference slice; see [`preference_view`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefs: Option<Vec<Condition>>,
}

fn full_range() -> [f64; 2] {
    [0.0, 1.0]
}

impl Default for PolicyMatch {
    fn default() -> Self {
        Self {
            label: LabelPattern::any(),
            risk: full_range(),
            prefs: None,
        }
    }
}

/// Flat string view of a preference slice for policy conditions:
/// `matched`, `min_auth_factors`, `consent.<flag>`, `privacy.<attribute>`.
pub fn preference_view(p: &PreferenceSlice) -> BTreeMap<String, String> {
    let mut view = BTreeMap::new();
    view.insert("matched".to_string(), p.matched.clone());
    if let Some(n) = p.entry.min_auth_factors {
        view.insert("min_auth_factors".to_string(), n.to_string());
    }
    for (k, v) in &p.entry.consent {
        view.insert(format!("consent.{k}"), v.to_string());
    }
    for (k, t) in &p.entry.privacy {
        let kind = serde_json::to_value(t).ok().and_then(|v| v["kind"].as_str().map(String::from));
        view.insert(format!("privacy.{k}"), kind.unwrap_or_default());
    }
    view
}

impl PolicyMatch {
    pub fn accepts(&self, label: &str, risk: f64, prefs: &PreferenceSlice) -> bool {
        if !self.label.matches(label) || risk < self.risk[0] || risk > self.risk[1] {
            return false;
        }
        match &self.prefs {
            None => true,
            Some(conds) => {
                let view = preference_view(prefs);
                conds.iter().all(|c| c.holds(|k| view.get(k).map(String::as_str)))
            }
        }
    }

    /// Number of non-wildcard match fields.
    pub fn specificity(&self) -> usize {
        usize::from(!self.label.is_wildcard())
            + usize::from(self.risk != full_range())
            + usize::from(self.prefs.is_some())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSecurityPolicy {
    pub id: String,
    #[serde(default)]
    pub priority: i64,
    #[serde(rename = "match", default)]
    pub matcher: PolicyMatch,
    pub actions: Vec<MechanismAction>,
    #[serde(default)]
    pub release: Release,
    #[serde(default = "default_true")]
    pub fail_closed: bool,
}

impl ContextSecurityPolicy {
    /// Holds data release and tells the user no policy covered the context.
    pub fn fallback() -> Self {
        Self {
            id: DEFAULT_POLICY_ID.into(),
            priority: 0,
            matcher: PolicyMatch::default(),
            actions: vec![MechanismAction::NotifyUser {
                message: "no policy covers context {label} (risk {risk}); data release held".into(),
            }],
            release: Release::Hold,
            fail_closed: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{location}: {message}")]
pub struct LintError {
    pub location: String,
    pub message: String,
}

impl LintError {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

/// Checks one policy on its own.
pub fn lint(p: &ContextSecurityPolicy) -> Result<(), LintError> {
    let at = |field: &str| format!("policy {}: {field}", p.id);
    if p.id.trim().is_empty() {
        return Err(LintError::new("policy <unnamed>: id", "empty id"));
    }
    let [lo, hi] = p.matcher.risk;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(LintError::new(at("match.risk"), "risk bounds must lie in [0, 1]"));
    }
    if lo > hi {
        return Err(LintError::new(
            at("match.risk"),
            format!("risk_min {lo} exceeds risk_max {hi}"),
        ));
    }
    if p.actions.is_empty() {
        return Err(LintError::new(at("actions"), "no actions"));
    }
    for (i, a) in p.actions.iter().enumerate() {
        a.check_params()
            .map_err(|m| LintError::new(at(&format!("actions[{i}] ({})", a.kind())), m))?;
    }
    if p.id == DEFAULT_POLICY_ID && p.matcher.specificity() != 0 {
        return Err(LintError::new(at("match"), "the default policy must match every context"));
    }
    Ok(())
}

/// Parses and lints a policy document: one policy object or an array.
pub fn lint_document(text: &str) -> Result<Vec<ContextSecurityPolicy>, LintError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
        LintError::new(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    let mut out = Vec::with_capacity(items.len());
    let mut ids = BTreeSet::new();
    for (i, item) in items.into_iter().enumerate() {
        let p: ContextSecurityPolicy = serde_json::from_value(item)
            .map_err(|e| LintError::new(format!("policies[{i}]"), e.to_string()))?;
        lint(&p).map_err(|e| LintError::new(format!("policies[{i}] {}", e.location), e.message))?;
        if !ids.insert(p.id.clone()) {
            return Err(LintError::new(format!("policies[{i}] policy {}: id", p.id), "duplicate id"));
        }
        out.push(p);
    }
    Ok(out)
}

/// The policy base. Always holds a default policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStore {
    policies: BTreeMap<String, ContextSecurityPolicy>,
    constraints: Vec<OrderingConstraint>,
}

impl Default for PolicyStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PolicyStore {
    pub fn new() -> Self {
        let mut policies = BTreeMap::new();
        policies.insert(DEFAULT_POLICY_ID.to_string(), ContextSecurityPolicy::fallback());
        Self {
            policies,
            constraints: OrderingConstraint::defaults(),
        }
    }

    /// Store from a policy document. A `default` entry replaces the built-in one.
    pub fn from_document(text: &str) -> Result<Self, LintError> {
        let mut store = Self::new();
        for p in lint_document(text)? {
            if p.id == DEFAULT_POLICY_ID {
                store.update(p)?;
            } else {
                store.add(p)?;
            }
        }
        Ok(store)
    }

    pub fn add(&mut self, p: ContextSecurityPolicy) -> Result<(), LintError> {
        lint(&p)?;
        if self.policies.contains_key(&p.id) {
            return Err(LintError::new(format!("policy {}: id", p.id), "duplicate id"));
        }
        self.policies.insert(p.id.clone(), p);
        Ok(())
    }

    pub fn update(&mut self, p: ContextSecurityPolicy) -> Result<(), LintError> {
        lint(&p)?;
        if !self.policies.contains_key(&p.id) {
            return Err(LintError::new(format!("policy {}: id", p.id), "no such policy"));
        }
        self.policies.insert(p.id.clone(), p);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Result<ContextSecurityPolicy, LintError> {
        if id == DEFAULT_POLICY_ID {
            return Err(LintError::new(
                format!("policy {id}"),
                "the default policy cannot be removed",
            ));
        }
        self.policies
            .remove(id)
            .ok_or_else(|| LintError::new(format!("policy {id}"), "no such policy"))
    }

    pub fn get(&self, id: &str) -> Option<&ContextSecurityPolicy> {
        self.policies.get(id)
    }

    pub fn default_policy(&self) -> &ContextSecurityPolicy {
        &self.policies[DEFAULT_POLICY_ID]
    }

    pub fn policies(&self) -> impl Iterator<Item = &ContextSecurityPolicy> {
        self.policies.values()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn constraints(&self) -> &[OrderingConstraint] {
        &self.constraints
    }

    pub fn set_constraints(&mut self, constraints: Vec<OrderingConstraint>) {
        self.constraints = constraints;
    }
}

/// Picks the accepting policy with the highest (specificity, priority),
/// smallest id on ties. The default policy is only a fallback.
pub fn select_policy<'a>(event: &ContextEvent, store: &'a PolicyStore) -> &'a ContextSecurityPolicy {
    store
        .policies()
        .filter(|p| p.id != DEFAULT_POLICY_ID)
        .filter(|p| p.matcher.accepts(&event.hlc.label, event.risk.score, &event.preferences))
        .min_by(|a, b| {
            b.matcher
                .specificity()
                .cmp(&a.matcher.specificity())
                .then(b.priority.cmp(&a.priority))
                .then_with(|| a.id.cmp(&b.id))
        })
        .unwrap_or_else(|| store.default_policy())
}
