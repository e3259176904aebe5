//! The wired pipeline: ingestion → qoc → reasoning → dissemination →
//! policy → mechanisms, plus the trust ledger, in simulated time.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde_json::json;

use super::scenario::{DeviceKind, EngineConfig, EventKind, Phase, Scenario, ScenarioEvent, UserAction};
use super::trace::{Stage, TraceRecord};
use super::HarnessError;
use crate::crypto::{self, KeyPair};
use crate::dissemination::{
    ContextEvent, Dispatcher, PreferenceDelta, PreferenceSet, PreferenceStore, Subscription, ThreatCatalog,
};
use crate::ingestion::{ContextReport, IngestError, Ingestion, LowLevelContext, RawValue};
use crate::mechanisms::authorization::{self, TokenRequest};
use crate::mechanisms::{AuthorizationToken, FactorClass, MechanismError, Mechanisms};
use crate::policy::{self, AccessRequest, EnforceContext, EnforcementTrace, PolicyStore, DEFAULT_POLICY_ID};
use crate::predicate::LabelPattern;
use crate::qoc::{self, QoCVector, QocSettings};
use crate::reasoning::{self, Classifier, ContextBase, HighLevelContext};
use crate::trust::{self, TrustLedger};
use crate::Millis;

struct UserState {
    privacy_key: Vec<u8>,
    cb: ContextBase,
    last_event: Option<ContextEvent>,
    selected: Option<String>,
}

pub struct Engine {
    config: EngineConfig,
    phases: Vec<Phase>,
    ingestion: Ingestion,
    qoc: QocSettings,
    ledger: TrustLedger,
    mechanisms: Mechanisms,
    classifier: Classifier,
    catalog: ThreatCatalog,
    prefs: PreferenceStore,
    policies: PolicyStore,
    dispatcher: Dispatcher,
    cspm: Mutex<Subscription>,
    users: BTreeMap<String, UserState>,
    device_keys: BTreeMap<String, KeyPair>,
    device_kinds: BTreeMap<String, DeviceKind>,
    owner_keys: BTreeMap<String, KeyPair>,
    last_sequence: BTreeMap<String, u64>,
    aliases: BTreeMap<String, String>,
    events: Vec<ContextEvent>,
    trace: Vec<TraceRecord>,
    now: Millis,
}

fn invalid(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::InvalidConfig(e.to_string())
}

impl Engine {
    /// Builds all module state from the scenario declarations. Identity keys
    /// are derived from the scenario name and seed.
    pub fn new(s: &Scenario, seed: u64) -> Result<Self, HarnessError> {
        s.qoc.validate().map_err(invalid)?;
        s.threats.validate().map_err(invalid)?;
        if !(0.0..=1.0).contains(&s.config.validation_threshold) {
            return Err(invalid("validation_threshold must lie in [0, 1]"));
        }
        let mut policies = PolicyStore::new();
        policies.set_constraints(s.config.constraints.clone());
        policy::stable_order(&policy::ACTION_KINDS, policies.constraints()).map_err(invalid)?;
        for p in &s.policies {
            if p.id == DEFAULT_POLICY_ID {
                policies.update(p.clone()).map_err(invalid)?;
            } else {
                policies.add(p.clone()).map_err(invalid)?;
            }
        }

        let key = |kind: &str, id: &str| KeyPair::derive(&format!("{}/{seed}/{kind}/{id}", s.name));
        let mut ledger = TrustLedger::new(s.config.trust, s.start);
        let mut mechanisms = Mechanisms::new(seed);
        let mut prefs = PreferenceStore::new();
        let mut users = BTreeMap::new();
        let mut owner_keys = BTreeMap::new();
        for u in &s.users {
            let kp = key("user", &u.id);
            ledger.register_owner(&u.id, kp.public());
            owner_keys.insert(u.id.clone(), kp);
            mechanisms.credentials.register_subject(&u.id);
            if let Some(k) = &u.credentials.knowledge {
                mechanisms.credentials.enroll(&u.id, FactorClass::Knowledge, k);
            }
            if let Some(p) = &u.credentials.possession {
                mechanisms.credentials.enroll(&u.id, FactorClass::Possession, p);
            }
            prefs.insert(PreferenceSet::new(u.id.clone()));
            let privacy_key = match &u.privacy_key {
                Some(k) => k.as_bytes().to_vec(),
                None => crypto::sha256_parts(&[b"caspaas.privacy-key", u.id.as_bytes()]).to_vec(),
            };
            users.insert(
                u.id.clone(),
                UserState {
                    privacy_key,
                    cb: ContextBase::new(),
                    last_event: None,
                    selected: None,
                },
            );
        }
        for p in &s.preferences {
            prefs.insert(p.clone());
        }

        let mut dispatcher = Dispatcher::new();
        let cspm = Mutex::new(dispatcher.subscribe(LabelPattern::any()));
        let mut engine = Self {
            config: s.config.clone(),
            phases: s.phases().to_vec(),
            ingestion: Ingestion::new(s.normalization.clone(), s.config.clock_skew_ms),
            qoc: s.qoc.clone(),
            ledger: TrustLedger::new(s.config.trust, s.start),
            mechanisms,
            classifier: Classifier { rules: s.rules.clone() },
            catalog: s.threats.clone(),
            prefs,
            policies,
            dispatcher,
            cspm,
            users,
            device_keys: BTreeMap::new(),
            device_kinds: BTreeMap::new(),
            owner_keys,
            last_sequence: BTreeMap::new(),
            aliases: BTreeMap::new(),
            events: Vec::new(),
            trace: Vec::new(),
            now: s.start,
        };
        std::mem::swap(&mut engine.ledger, &mut ledger);
        for d in &s.devices {
            let kp = key("device", &d.id);
            let before = engine.ledger.blocks().len();
            engine
                .ledger
                .register_device(&d.id, &d.owner, kp.public(), s.start)
                .map_err(invalid)?;
            engine.trace_ledger(before, None);
            engine.mechanisms.add_identity(&d.id, kp.clone());
            engine.device_keys.insert(d.id.clone(), kp);
            engine.device_kinds.insert(d.id.clone(), d.kind);
        }
        Ok(engine)
    }

    pub fn ledger(&self) -> &TrustLedger {
        &self.ledger
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    /// Moves simulated time forward; earlier instants are ignored.
    pub fn set_now(&mut self, t: Millis) {
        self.now = self.now.max(t);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn cib_len(&self) -> usize {
        self.ingestion.cib().len()
    }

    pub fn events_since(&self, seq: u64) -> impl Iterator<Item = &ContextEvent> {
        self.events.iter().filter(move |e| e.seq > seq)
    }

    pub fn current_context(&self, user: &str) -> Option<&HighLevelContext> {
        self.users.get(user)?.cb.current()
    }

    pub fn accepted_contexts(&self, user: &str) -> &[HighLevelContext] {
        self.users.get(user).map_or(&[], |u| u.cb.entries())
    }

    pub fn has_user(&self, user: &str) -> bool {
        self.users.contains_key(user)
    }

    pub fn token_alias(&self, alias: &str) -> Option<&str> {
        self.aliases.get(alias).map(String::as_str)
    }

    fn phase(&self) -> Option<String> {
        self.phases
            .iter()
            .rev()
            .find(|p| p.start <= self.now)
            .map(|p| p.name.clone())
    }

    fn record(&mut self, stage: Stage, outcome: &str, payload: serde_json::Value) {
        let phase = self.phase();
        self.trace.push(TraceRecord {
            t: self.now,
            phase,
            stage,
            outcome: outcome.to_string(),
            payload,
        });
    }

    fn trace_ledger(&mut self, from: usize, note: Option<&str>) {
        let blocks: Vec<_> = self.ledger.blocks()[from..].to_vec();
        for b in blocks {
            let mut payload = json!({
                "index": b.index,
                "kind": b.entry.kind(),
                "hash": crypto::b64_encode(&b.hash),
                "entry": b.entry,
            });
            if let Some(n) = note {
                payload["note"] = json!(n);
            }
            self.record(Stage::Ledger, "appended", payload);
        }
    }

    fn is_sensor_of(&self, source: &str, user: &str) -> bool {
        self.device_kinds.get(source).copied().unwrap_or_default() == DeviceKind::Sensor
            && self.ledger.device(source).is_some_and(|d| d.owner == user)
    }

    /// Users with at least one sensor device get an inference pipeline.
    fn pipeline_users(&self) -> Vec<String> {
        self.users
            .keys()
            .filter(|u| {
                self.ledger
                    .devices_owned_by(u)
                    .any(|d| self.is_sensor_of(&d.device_id, u))
            })
            .cloned()
            .collect()
    }

    pub fn handle(&mut self, e: &ScenarioEvent) {
        self.set_now(e.t);
        match &e.kind {
            EventKind::DeviceReport {
                device,
                attribute,
                value,
                observed_at,
                sequence,
                forge,
            } => {
                let report = self.make_report(device, attribute, value.clone(), *observed_at, *sequence, *forge);
                let _ = self.ingest(&report);
            }
            EventKind::AdvanceClock {} => self.tick(),
            EventKind::UserAction { user, action } => self.user_action(user, action),
            EventKind::AppRequest {
                requester,
                user,
                attribute,
                token,
                factors,
            } => {
                let token = token
                    .as_ref()
                    .map(|a| self.aliases.get(a).cloned().unwrap_or_else(|| a.clone()));
                let req = AccessRequest {
                    requester: requester.clone(),
                    attribute: attribute.clone(),
                    token,
                    factors: factors.clone(),
                };
                let _ = self.app_request(user, &req);
            }
        }
    }

    /// Signs a simulated report. Sequences continue from the last one used.
    pub fn make_report(
        &mut self,
        device: &str,
        attribute: &str,
        value: RawValue,
        observed_at: Option<Millis>,
        sequence: Option<u64>,
        forge: bool,
    ) -> ContextReport {
        let last = self.last_sequence.get(device).copied().unwrap_or(0);
        let seq = sequence.unwrap_or(last + 1);
        self.last_sequence.insert(device.to_string(), last.max(seq));
        let key = match self.device_keys.get(device) {
            Some(k) if !forge => k.clone(),
            _ => KeyPair::derive(&format!("forged/{device}")),
        };
        ContextReport::signed(&key, device, attribute, value, observed_at.unwrap_or(self.now), seq)
    }

    /// Ingests one report, feeds its QoC back into the device reputation,
    /// and traces the outcome.
    pub fn ingest(&mut self, report: &ContextReport) -> Result<LowLevelContext, IngestError> {
        let res = self
            .ingestion
            .ingest_report(report, self.now, &mut self.ledger, &self.qoc);
        match &res {
            Err(e) => {
                self.record(
                    Stage::Ingest,
                    "rejected",
                    json!({
                        "device": report.device_id,
                        "attribute": report.attribute,
                        "sequence": report.sequence,
                        "reason": e.to_string(),
                    }),
                );
            }
            Ok(llc) => {
                self.record(
                    Stage::Ingest,
                    "accepted",
                    json!({
                        "device": report.device_id,
                        "attribute": report.attribute,
                        "sequence": report.sequence,
                        "value": llc.value,
                        "unit": llc.unit,
                    }),
                );
                let before = self.ledger.blocks().len();
                let rep = self
                    .ledger
                    .update_reputation(&report.device_id, llc.qoc.mean(), self.now)
                    .ok();
                self.record(
                    Stage::Qoc,
                    "scored",
                    json!({
                        "device": report.device_id,
                        "key": llc.key,
                        "qoc": llc.qoc,
                        "reputation": rep,
                    }),
                );
                self.trace_ledger(before, None);
            }
        }
        res
    }

    /// Runs inference for every pipeline.
    pub fn tick(&mut self) {
        for user in self.pipeline_users() {
            self.infer_user(&user);
        }
    }

    /// Inference for the owner of `device`, if it is a sensor.
    pub fn infer_for_device(&mut self, device: &str) {
        if let Some(owner) = self.ledger.device(device).map(|d| d.owner.clone()) {
            if self.is_sensor_of(device, &owner) && self.users.contains_key(&owner) {
                self.infer_user(&owner);
            }
        }
    }

    pub fn infer_user(&mut self, user: &str) {
        let snapshot = {
            let ledger = &self.ledger;
            reasoning::build_snapshot(
                self.ingestion.cib(),
                self.now,
                &self.config.context_keys,
                &self.qoc,
                |s| ledger.reputation(s),
                |s| self.is_sensor_of(s, user),
            )
        };
        if snapshot.entries.is_empty() {
            return;
        }
        let hlc = reasoning::infer(&snapshot, &self.classifier);
        let values = snapshot.values();
        let last = self.users[user].cb.current().map(|h| h.label.clone());
        if last.as_deref() == Some(hlc.label.as_str()) {
            self.record(
                Stage::Infer,
                "unchanged",
                json!({"user": user, "label": hlc.label, "snapshot": values}),
            );
            return;
        }
        self.record(
            Stage::Infer,
            "inferred",
            json!({
                "user": user,
                "label": hlc.label,
                "confidence": hlc.confidence,
                "contributing": hlc.contributing,
                "snapshot": values,
                "completeness": snapshot.completeness,
            }),
        );
        let qocs: Vec<QoCVector> = hlc
            .contributing
            .iter()
            .filter_map(|k| snapshot.entries.get(k).map(|e| e.qoc))
            .collect();
        let threshold = self.config.validation_threshold;
        let score = qoc::validation_score(hlc.confidence, &qocs);
        let accepted = qoc::validate_hlc(&hlc, &qocs, threshold);
        self.record(
            Stage::Qoc,
            if accepted { "validated" } else { "rejected" },
            json!({"user": user, "label": hlc.label, "score": score, "threshold": threshold}),
        );
        let state = self.users.get_mut(user).expect("pipeline users are declared");
        state.cb.commit_hlc(hlc.clone(), accepted);
        if !accepted {
            return;
        }

        let event = match self
            .dispatcher
            .disseminate(user, &hlc, &snapshot, &self.catalog, &self.prefs)
        {
            Ok(e) => e,
            Err(e) => {
                log::warn!("dissemination failed: {e}");
                return;
            }
        };
        self.record(
            Stage::Risk,
            "assessed",
            json!({
                "user": user,
                "label": hlc.label,
                "score": event.risk.score,
                "level": event.risk.level,
                "matched": event.risk.matched,
            }),
        );
        self.record(
            Stage::Publish,
            "published",
            json!({"seq": event.seq, "user": user, "label": hlc.label, "preferences": event.preferences.matched}),
        );
        self.run_cspm();
    }

    /// The policy manager consumes everything published since its last run.
    fn run_cspm(&mut self) {
        let queued = self.cspm.lock().expect("cspm lock").drain();
        for ev in queued {
            let p = policy::select_policy(&ev, &self.policies);
            let payload = json!({
                "seq": ev.seq,
                "user": ev.user_id,
                "label": ev.hlc.label,
                "risk": ev.risk.level,
                "policy": p.id,
                "specificity": p.matcher.specificity(),
                "priority": p.priority,
            });
            let id = p.id.clone();
            self.record(Stage::Select, "selected", payload);
            if let Some(state) = self.users.get_mut(&ev.user_id) {
                state.selected = Some(id);
                state.last_event = Some(ev.clone());
            }
            self.events.push(ev);
        }
    }

    pub fn update_preferences(&mut self, user: &str, delta: &PreferenceDelta) -> Option<PreferenceSet> {
        self.prefs.update_preferences(user, delta).ok()
    }

    /// Re-publishes the user's current event with fresh preferences.
    pub fn republish(&mut self, user: &str) {
        let Some(ev) = self.users.get(user).and_then(|s| s.last_event.clone()) else {
            return;
        };
        if self.dispatcher.republish(&ev, &self.prefs).is_ok() {
            self.run_cspm();
        }
    }

    fn user_action(&mut self, user: &str, action: &UserAction) {
        let before = self.ledger.blocks().len();
        match action {
            UserAction::PreferenceChange { delta } => {
                self.update_preferences(user, delta);
            }
            UserAction::TokenGrant {
                alias,
                subject,
                resource,
                operations,
                constraint,
                ttl_ms,
            } => {
                let req = TokenRequest {
                    token_id: None,
                    subject: subject.clone(),
                    resource: resource.clone(),
                    operations: operations.clone(),
                    constraint: constraint.clone(),
                    expiry: self.now + ttl_ms,
                };
                match self.grant_token(&req) {
                    Ok(t) => {
                        self.aliases.insert(alias.clone(), t.token_id);
                        self.trace_ledger(before, Some(&format!("alias {alias}")));
                    }
                    Err(e) => self.ledger_rejected("token_grant", &e.to_string()),
                }
            }
            UserAction::TokenRevoke { alias } => {
                let id = self.aliases.get(alias).cloned().unwrap_or_else(|| alias.clone());
                match self.revoke_token(&id) {
                    Ok(()) => self.trace_ledger(before, Some(&format!("alias {alias}"))),
                    Err(e) => self.ledger_rejected("token_revoke", &e.to_string()),
                }
            }
            UserAction::OwnershipTransfer { device, to } => match self.transfer(device, to) {
                Ok(()) => self.trace_ledger(before, None),
                Err(e) => self.ledger_rejected("ownership_transfer", &e),
            },
        }
    }

    fn ledger_rejected(&mut self, kind: &str, reason: &str) {
        self.record(Stage::Ledger, "rejected", json!({"kind": kind, "reason": reason}));
    }

    fn transfer(&mut self, device: &str, to: &str) -> Result<(), String> {
        let dev = self
            .ledger
            .device(device)
            .ok_or_else(|| format!("unknown device {device}"))?;
        let key = self
            .owner_keys
            .get(&dev.owner)
            .ok_or_else(|| format!("no key for owner {}", dev.owner))?;
        let sig = key.sign(&trust::transfer_message(device, to, dev.transfers));
        self.ledger
            .transfer_ownership(device, to, &sig, self.now)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    pub fn grant_token(&mut self, req: &TokenRequest) -> Result<AuthorizationToken, MechanismError> {
        authorization::grant_token(&mut self.ledger, req, self.now)
    }

    pub fn revoke_token(&mut self, token_id: &str) -> Result<(), MechanismError> {
        authorization::revoke_token(&mut self.ledger, token_id, self.now)
    }

    /// Composes the plan for the user's current context and enforces it for
    /// this request. Preferences are re-read so later changes apply.
    pub fn app_request(&mut self, user: &str, req: &AccessRequest) -> Option<EnforcementTrace> {
        let Some(state) = self.users.get(user) else {
            self.record(Stage::Plan, "rejected", json!({"user": user, "reason": "unknown user"}));
            return None;
        };
        let Some(mut event) = state.last_event.clone() else {
            self.record(
                Stage::Plan,
                "rejected",
                json!({"user": user, "requester": req.requester, "reason": "no published context"}),
            );
            return None;
        };
        let privacy_key = state.privacy_key.clone();
        let policy = state
            .selected
            .as_deref()
            .and_then(|id| self.policies.get(id))
            .unwrap_or_else(|| policy::select_policy(&event, &self.policies))
            .clone();
        if let Ok(p) = self.prefs.get_preferences(user, &event.hlc.label) {
            event.preferences = p;
        }
        let plan = match policy::compose_plan(&policy, &event, self.policies.constraints()) {
            Ok(p) => p,
            Err(e) => {
                self.record(
                    Stage::Plan,
                    "error",
                    json!({"seq": event.seq, "policy": policy.id, "reason": e.to_string()}),
                );
                return None;
            }
        };
        self.record(
            Stage::Plan,
            "composed",
            json!({
                "seq": event.seq,
                "user": user,
                "label": event.hlc.label,
                "policy": plan.policy_id,
                "requester": req.requester,
                "attribute": req.attribute,
                "steps": plan.steps,
                "release": plan.release,
                "fail_closed": plan.fail_closed,
            }),
        );
        let resource = self
            .ingestion
            .cib()
            .latest(&req.attribute, self.now, |s| self.is_sensor_of(s, user))
            .map(|r| (r.value.clone(), r.source.clone()));
        let before = self.ledger.blocks().len();
        let trace = policy::enforce(
            &plan,
            EnforceContext {
                mechanisms: &mut self.mechanisms,
                ledger: &mut self.ledger,
                event: &event,
                request: Some(req),
                resource,
                user_key: &privacy_key,
                now: self.now,
            },
        );
        for s in &trace.steps {
            let outcome = serde_json::to_value(s.outcome).expect("outcome serializes");
            let mut payload = json!({
                "seq": trace.event_seq,
                "index": s.index,
                "step": s.step,
                "detail": s.detail,
            });
            if let Some(v) = &s.value {
                payload["value"] = json!(v);
            }
            self.record(Stage::EnforceStep, outcome.as_str().unwrap_or("unknown"), payload);
        }
        self.trace_ledger(before, None);
        Some(trace)
    }
}
