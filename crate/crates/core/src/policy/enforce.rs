//! Plan execution against the mechanisms, fail-closed by default.

use serde::{Deserialize, Serialize};

use super::{EnforcementPlan, MechanismAction, Release};
use crate::dissemination::ContextEvent;
use crate::ingestion::ContextValue;
use crate::mechanisms::{self, Envelope, Mechanisms, PresentedFactor, PrivacyOutcome, TokenDecision};
use crate::trust::TrustLedger;
use crate::Millis;

/// An application's pull of one attribute of the user's context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub requester: String,
    pub attribute: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing)]
    pub factors: Vec<PresentedFactor>,
}

pub struct EnforceContext<'a> {
    pub mechanisms: &'a mut Mechanisms,
    pub ledger: &'a mut TrustLedger,
    pub event: &'a ContextEvent,
    pub request: Option<&'a AccessRequest>,
    /// Current value of the requested attribute and the device it came from.
    pub resource: Option<(ContextValue, String)>,
    pub user_key: &'a [u8],
    pub now: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Ok,
    Failed,
    Released,
    Scheduled,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    /// Action kind, or `"release"` for the closing record.
    pub step: String,
    pub outcome: StepOutcome,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnforcementTrace {
    pub event_seq: u64,
    pub policy_id: String,
    pub steps: Vec<StepRecord>,
    pub released: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notifications: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Envelope>,
}

impl EnforcementTrace {
    pub fn release_record(&self) -> &StepRecord {
        self.steps.last().expect("a trace always ends with a release record")
    }

    pub fn position(&self, step: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.step == step)
    }
}

struct Run {
    channel: Option<String>,
    pending: Option<PrivacyOutcome>,
    notifications: Vec<String>,
}

fn resolve(peer: &str, ctx: &EnforceContext<'_>) -> Result<String, String> {
    match peer {
        "@requester" => ctx
            .request
            .map(|r| r.requester.clone())
            .ok_or_else(|| "no requester".to_string()),
        "@resource_source" => ctx
            .resource
            .as_ref()
            .map(|(_, src)| src.clone())
            .ok_or_else(|| "no requested resource".to_string()),
        "@user" => Ok(ctx.event.user_id.clone()),
        other => Ok(other.to_string()),
    }
}

fn step(action: &MechanismAction, ctx: &mut EnforceContext<'_>, run: &mut Run) -> Result<String, String> {
    match action {
        MechanismAction::Authenticate { factors } => {
            let presented = ctx.request.map_or(&[][..], |r| r.factors.as_slice());
            let outcome = ctx
                .mechanisms
                .authenticate(&ctx.event.user_id, *factors, presented)
                .map_err(|e| e.to_string())?;
            match outcome {
                mechanisms::AuthOutcome::Pass => Ok(format!("{factors} factor(s) verified")),
                mechanisms::AuthOutcome::Fail(reason) => Err(reason),
            }
        }
        MechanismAction::RenewSessionKey { target } => {
            let target = resolve(target, ctx)?;
            let key = ctx
                .mechanisms
                .renew_session_key(ctx.ledger, &target, ctx.now)
                .map_err(|e| e.to_string())?;
            Ok(format!("{target} at epoch {}", key.epoch))
        }
        MechanismAction::EstablishSecureChannel { peers } => {
            let a = resolve(&peers[0], ctx)?;
            let b = resolve(&peers[1], ctx)?;
            let id = ctx
                .mechanisms
                .establish_channel(ctx.ledger, &a, &b, ctx.now)
                .map_err(|e| e.to_string())?;
            run.channel = Some(id.clone());
            Ok(id)
        }
        MechanismAction::ApplyPrivacy { attribute, transform } => {
            let requested = ctx.request.is_some_and(|r| &r.attribute == attribute);
            let current = match &run.pending {
                Some(PrivacyOutcome::Released { value }) if requested => value.clone(),
                Some(_) if requested => return Ok(format!("{attribute} already withheld")),
                _ => return Ok(format!("{attribute} not requested")),
            };
            let out = ctx
                .mechanisms
                .apply_privacy(&current, transform, ctx.user_key, ctx.now)
                .map_err(|e| e.to_string())?;
            let detail = match &out {
                PrivacyOutcome::Released { .. } => format!("{attribute} transformed"),
                PrivacyOutcome::Suppressed => format!("{attribute} suppressed"),
                PrivacyOutcome::Scheduled { at, .. } => format!("{attribute} delayed until {at}"),
            };
            run.pending = Some(out);
            Ok(detail)
        }
        MechanismAction::CheckToken { token, operation } => {
            let token = match token.as_str() {
                "@request" => ctx
                    .request
                    .and_then(|r| r.token.clone())
                    .ok_or_else(|| "no token presented".to_string())?,
                other => other.to_string(),
            };
            let decision = mechanisms::authorization::check_token(
                ctx.ledger,
                &token,
                &ctx.event.hlc.label,
                operation,
                ctx.now,
            )
            .map_err(|e| e.to_string())?;
            match decision {
                TokenDecision::Allow => Ok(format!("{token} allows {operation}")),
                TokenDecision::Deny(reason) => {
                    Err(format!("{token} denied: {}", format!("{reason:?}").to_lowercase()))
                }
            }
        }
        MechanismAction::NotifyUser { message } => {
            run.notifications.push(message.clone());
            Ok(message.clone())
        }
    }
}

/// Executes the plan step by step. With `fail_closed`, the first failure
/// stops execution and denies release; a release record always closes the trace.
pub fn enforce(plan: &EnforcementPlan, mut ctx: EnforceContext<'_>) -> EnforcementTrace {
    let mut run = Run {
        channel: None,
        pending: ctx
            .resource
            .as_ref()
            .map(|(v, _)| PrivacyOutcome::Released { value: v.clone() }),
        notifications: Vec::new(),
    };
    let mut records = Vec::with_capacity(plan.steps.len() + 1);
    let mut failure: Option<usize> = None;
    for (index, s) in plan.steps.iter().enumerate() {
        let (outcome, detail) = match step(&s.action, &mut ctx, &mut run) {
            Ok(d) => (StepOutcome::Ok, d),
            Err(d) => (StepOutcome::Failed, d),
        };
        records.push(StepRecord {
            index,
            step: s.action.kind().to_string(),
            outcome,
            detail,
            value: None,
        });
        if outcome == StepOutcome::Failed {
            failure.get_or_insert(index);
            if plan.fail_closed {
                break;
            }
        }
    }

    let index = plan.steps.len();
    let deny = |detail: String| StepRecord {
        index,
        step: "release".into(),
        outcome: StepOutcome::Denied,
        detail,
        value: None,
    };
    let mut envelope = None;
    let release = match (failure, plan.fail_closed) {
        (Some(i), true) => deny(format!(
            "step {i} ({}) failed; {} step(s) not executed",
            plan.steps[i].action.kind(),
            plan.steps.len() - i - 1
        )),
        _ if plan.release == Release::Hold => deny("held by policy".into()),
        _ => match (ctx.request, run.pending.take()) {
            (None, _) => deny("no data requested".into()),
            (Some(r), None) => deny(format!("no current value for {}", r.attribute)),
            (Some(r), Some(PrivacyOutcome::Suppressed)) => StepRecord {
                index,
                step: "release".into(),
                outcome: StepOutcome::Released,
                detail: format!("{} suppressed from payload", r.attribute),
                value: None,
            },
            (Some(r), Some(PrivacyOutcome::Scheduled { at, .. })) => StepRecord {
                index,
                step: "release".into(),
                outcome: StepOutcome::Scheduled,
                detail: format!("{} release scheduled at {at}", r.attribute),
                value: None,
            },
            (Some(r), Some(PrivacyOutcome::Released { value })) => {
                match deliver(&mut ctx, &run, r, &value) {
                    Ok((detail, delivered, env)) => {
                        envelope = env;
                        StepRecord {
                            index,
                            step: "release".into(),
                            outcome: StepOutcome::Released,
                            detail,
                            value: Some(delivered),
                        }
                    }
                    Err(e) => deny(format!("delivery failed: {e}")),
                }
            }
        },
    };
    let released = matches!(release.outcome, StepOutcome::Released | StepOutcome::Scheduled);
    records.push(release);
    EnforcementTrace {
        event_seq: plan.event_seq,
        policy_id: plan.policy_id.clone(),
        steps: records,
        released,
        notifications: run.notifications,
        envelope,
    }
}

/// Seals the payload when a channel is up and reads it back as the receiver
/// would; otherwise the value goes out in clear.
fn deliver(
    ctx: &mut EnforceContext<'_>,
    run: &Run,
    r: &AccessRequest,
    value: &ContextValue,
) -> Result<(String, String, Option<Envelope>), String> {
    let Some(channel) = &run.channel else {
        return Ok(("released in clear".into(), value.to_string(), None));
    };
    let payload = serde_json::to_vec(&serde_json::json!({ r.attribute.as_str(): value }))
        .map_err(|e| e.to_string())?;
    let aad = format!("event:{};requester:{}", ctx.event.seq, r.requester);
    let env = ctx
        .mechanisms
        .seal(channel, &payload, aad.as_bytes())
        .map_err(|e| e.to_string())?;
    let opened = ctx.mechanisms.unseal(channel, &env).map_err(|e| e.to_string())?;
    let body: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&opened).map_err(|e| e.to_string())?;
    let got: ContextValue = serde_json::from_value(body[&r.attribute].clone()).map_err(|e| e.to_string())?;
    Ok((format!("sealed over {channel}"), got.to_string(), Some(env)))
}
