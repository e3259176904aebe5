//! Transport-agnostic service API. Each endpoint maps onto one module
//! operation; an HTTP server only has to forward method, path, query and body.

use std::collections::BTreeMap;
use std::sync::RwLock;

use serde_json::json;

use super::{Engine, HarnessError, Scenario};
use crate::dissemination::PreferenceDelta;
use crate::ingestion::{ContextReport, IngestError};
use crate::mechanisms::authorization::check_token;
use crate::mechanisms::{MechanismError, TokenRequest};
use crate::Millis;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl Response {
    fn json(status: u16, v: serde_json::Value) -> Self {
        Self {
            status,
            content_type: "application/json",
            body: v.to_string(),
        }
    }

    fn error(status: u16, message: impl std::fmt::Display) -> Self {
        Self::json(status, json!({ "error": message.to_string() }))
    }
}

fn ingest_status(e: &IngestError) -> u16 {
    match e {
        IngestError::UnknownDevice(_) => 404,
        IngestError::BadSignature => 401,
        IngestError::ReplayedSequence { .. } => 409,
        IngestError::ClockSkewExceeded { .. } | IngestError::UnnormalizableValue { .. } => 422,
        IngestError::InvalidWindow { .. } => 400,
    }
}

fn mechanism_status(e: &MechanismError) -> u16 {
    match e {
        MechanismError::UnknownToken(_)
        | MechanismError::UnknownSubject(_)
        | MechanismError::UnknownDevice(_)
        | MechanismError::UnknownPeer(_)
        | MechanismError::UnknownChannel(_) => 404,
        MechanismError::Ledger(_) => 409,
        _ => 400,
    }
}

/// Reports are processed one at a time; reads share the lock.
pub struct Service {
    engine: RwLock<Engine>,
}

impl Service {
    pub fn new(config: &Scenario) -> Result<Self, HarnessError> {
        Ok(Self::from_engine(Engine::new(config, config.seed)?))
    }

    pub fn from_engine(engine: Engine) -> Self {
        Self {
            engine: RwLock::new(engine),
        }
    }

    pub fn handle(&self, method: &str, path: &str, query: &str, body: &str, now: Millis) -> Response {
        let q: BTreeMap<String, String> = form_urlencoded::parse(query.as_bytes()).into_owned().collect();
        let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
        match (method, segments.as_slice()) {
            ("POST", ["reports"]) => self.post_report(body, now),
            ("GET", ["context", "current"]) => self.current_context(&q),
            ("GET", ["events"]) => self.events(&q),
            ("PUT", ["preferences", user]) => self.put_preferences(user, body, now),
            ("POST", ["tokens"]) => self.post_token(body, now),
            ("DELETE", ["tokens", id]) => self.delete_token(id, now),
            ("GET", ["tokens", id, "check"]) => self.check(id, &q, now),
            ("GET", ["ledger", "verify"]) => {
                let e = self.engine.read().expect("engine lock");
                Response::json(
                    200,
                    json!({"valid": e.ledger().verify_chain(), "blocks": e.ledger().blocks().len()}),
                )
            }
            (_, ["reports"] | ["context", "current"] | ["events"] | ["tokens"] | ["ledger", "verify"])
            | (_, ["preferences", _] | ["tokens", _] | ["tokens", _, "check"]) => {
                Response::error(405, format!("{method} not allowed on {path}"))
            }
            _ => Response::error(404, format!("no route for {path}")),
        }
    }

    fn post_report(&self, body: &str, now: Millis) -> Response {
        let report: ContextReport = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return Response::error(400, e),
        };
        let mut e = self.engine.write().expect("engine lock");
        e.set_now(now);
        match e.ingest(&report) {
            Ok(llc) => {
                e.infer_for_device(&report.device_id);
                Response::json(
                    202,
                    json!({"accepted": true, "key": llc.key, "value": llc.value, "cib_len": e.cib_len()}),
                )
            }
            Err(err) => Response::error(ingest_status(&err), err),
        }
    }

    fn current_context(&self, q: &BTreeMap<String, String>) -> Response {
        let Some(user) = q.get("user") else {
            return Response::error(400, "missing user parameter");
        };
        let e = self.engine.read().expect("engine lock");
        if !e.has_user(user) {
            return Response::error(404, format!("unknown user {user}"));
        }
        match e.current_context(user) {
            Some(h) => Response::json(200, serde_json::to_value(h).expect("serializes")),
            None => Response::error(404, format!("no context for {user} yet")),
        }
    }

    /// Newline-delimited events after `since` (default 0).
    fn events(&self, q: &BTreeMap<String, String>) -> Response {
        let since = match q.get("since").map(|s| s.parse::<u64>()) {
            None => 0,
            Some(Ok(n)) => n,
            Some(Err(e)) => return Response::error(400, e),
        };
        let e = self.engine.read().expect("engine lock");
        let mut body = String::new();
        for ev in e.events_since(since) {
            body.push_str(&serde_json::to_string(ev).expect("serializes"));
            body.push('\n');
        }
        Response {
            status: 200,
            content_type: "application/x-ndjson",
            body,
        }
    }

    fn put_preferences(&self, user: &str, body: &str, now: Millis) -> Response {
        let delta: PreferenceDelta = match serde_json::from_str(body) {
            Ok(d) => d,
            Err(e) => return Response::error(400, e),
        };
        let mut e = self.engine.write().expect("engine lock");
        e.set_now(now);
        match e.update_preferences(user, &delta) {
            Some(set) => {
                e.republish(user);
                Response::json(200, serde_json::to_value(set).expect("serializes"))
            }
            None => Response::error(404, format!("unknown user {user}")),
        }
    }

    fn post_token(&self, body: &str, now: Millis) -> Response {
        let req: TokenRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return Response::error(400, e),
        };
        let mut e = self.engine.write().expect("engine lock");
        e.set_now(now);
        match e.grant_token(&req) {
            Ok(t) => Response::json(201, serde_json::to_value(t).expect("serializes")),
            Err(err) => Response::error(mechanism_status(&err), err),
        }
    }

    fn delete_token(&self, id: &str, now: Millis) -> Response {
        let mut e = self.engine.write().expect("engine lock");
        e.set_now(now);
        match e.revoke_token(id) {
            Ok(()) => Response::json(200, json!({"revoked": id})),
            Err(err) => Response::error(mechanism_status(&err), err),
        }
    }

    fn check(&self, id: &str, q: &BTreeMap<String, String>, now: Millis) -> Response {
        let Some(label) = q.get("label") else {
            return Response::error(400, "missing label parameter");
        };
        let op = q.get("op").map_or("read", String::as_str);
        let e = self.engine.read().expect("engine lock");
        match check_token(e.ledger(), id, label, op, now.max(e.now())) {
            Ok(d) => Response::json(200, serde_json::to_value(d).expect("serializes")),
            Err(err) => Response::error(mechanism_status(&err), err),
        }
    }
}
