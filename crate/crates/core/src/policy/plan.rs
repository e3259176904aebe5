//! Plan composition: preference adjustments, placeholder expansion and a
//! stable topological sort under kind-level ordering constraints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ContextSecurityPolicy, MechanismAction, Release, ACTION_KINDS};
use crate::dissemination::ContextEvent;

/// Every `before` step precedes every `after` step in a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingConstraint {
    pub before: String,
    pub after: String,
}

impl OrderingConstraint {
    pub fn new(before: &str, after: &str) -> Self {
        Self {
            before: before.into(),
            after: after.into(),
        }
    }

    /// Authenticate before token checks; secure the channel before anything
    /// that produces releasable data.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new("authenticate", "check_token"),
            Self::new("establish_secure_channel", "apply_privacy"),
        ]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("ordering constraints are cyclic among {0:?}")]
    CyclicConstraints(Vec<String>),
    #[error("unknown action kind {0} in ordering constraint")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrigin {
    Policy,
    Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub action: MechanismAction,
    pub origin: StepOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnforcementPlan {
    pub event_seq: u64,
    pub user_id: String,
    pub policy_id: String,
    pub steps: Vec<PlanStep>,
    pub release: Release,
    pub fail_closed: bool,
}

/// Kahn's algorithm, always taking the smallest ready index; this yields the
/// lexicographically smallest order that satisfies the constraints.
pub fn stable_order(kinds: &[&str], constraints: &[OrderingConstraint]) -> Result<Vec<usize>, PlanError> {
    for c in constraints {
        for k in [&c.before, &c.after] {
            if !ACTION_KINDS.contains(&k.as_str()) {
                return Err(PlanError::UnknownKind(k.clone()));
            }
        }
    }
    let n = kinds.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for (i, ki) in kinds.iter().enumerate() {
        for (j, kj) in kinds.iter().enumerate() {
            if i != j && constraints.iter().any(|c| c.before == *ki && c.after == *kj) {
                succ[i].push(j);
                indegree[j] += 1;
            }
        }
    }
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let Some(next) = (0..n).find(|&i| !placed[i] && indegree[i] == 0) else {
            let mut stuck: Vec<String> = (0..n)
                .filter(|&i| !placed[i])
                .map(|i| kinds[i].to_string())
                .collect();
            stuck.sort();
            stuck.dedup();
            return Err(PlanError::CyclicConstraints(stuck));
        };
        placed[next] = true;
        order.push(next);
        for &j in &succ[next] {
            indegree[j] -= 1;
        }
    }
    Ok(order)
}

pub fn compose_plan(
    policy: &ContextSecurityPolicy,
    event: &ContextEvent,
    constraints: &[OrderingConstraint],
) -> Result<EnforcementPlan, PlanError> {
    let mut steps: Vec<PlanStep> = policy
        .actions
        .iter()
        .map(|a| PlanStep {
            action: a.clone(),
            origin: StepOrigin::Policy,
        })
        .collect();

    // User preferences can only strengthen a plan.
    let prefs = &event.preferences.entry;
    if let Some(n) = prefs.min_auth_factors.filter(|n| *n > 0) {
        let mut raised = false;
        for s in &mut steps {
            if let MechanismAction::Authenticate { factors } = &mut s.action {
                *factors = (*factors).max(n.min(2));
                raised = true;
            }
        }
        if !raised {
            steps.insert(
                0,
                PlanStep {
                    action: MechanismAction::Authenticate { factors: n.min(2) },
                    origin: StepOrigin::Preference,
                },
            );
        }
    }
    for (attribute, transform) in &prefs.privacy {
        let covered = steps.iter().any(
            |s| matches!(&s.action, MechanismAction::ApplyPrivacy { attribute: a, .. } if a == attribute),
        );
        if !covered {
            steps.push(PlanStep {
                action: MechanismAction::ApplyPrivacy {
                    attribute: attribute.clone(),
                    transform: transform.clone(),
                },
                origin: StepOrigin::Preference,
            });
        }
    }

    // Placeholders known from the event alone.
    let sources = event.snapshot.sources();
    let mut resolved = Vec::with_capacity(steps.len());
    for s in steps {
        match &s.action {
            MechanismAction::RenewSessionKey { target } if target == "@sources" => {
                for src in &sources {
                    resolved.push(PlanStep {
                        action: MechanismAction::RenewSessionKey { target: src.clone() },
                        origin: s.origin,
                    });
                }
            }
            MechanismAction::NotifyUser { message } => resolved.push(PlanStep {
                action: MechanismAction::NotifyUser {
                    message: message
                        .replace("{label}", &event.hlc.label)
                        .replace("{risk}", &format!("{:?}", event.risk.level).to_lowercase()),
                },
                origin: s.origin,
            }),
            _ => resolved.push(s),
        }
    }

    let kinds: Vec<&str> = resolved.iter().map(|s| s.action.kind()).collect();
    let order = stable_order(&kinds, constraints)?;
    let mut slots: Vec<Option<PlanStep>> = resolved.into_iter().map(Some).collect();
    let steps = order.into_iter().map(|i| slots[i].take().unwrap()).collect();

    Ok(EnforcementPlan {
        event_seq: event.seq,
        user_id: event.user_id.clone(),
        policy_id: policy.id.clone(),
        steps,
        release: policy.release,
        fail_closed: policy.fail_closed,
    })
}
