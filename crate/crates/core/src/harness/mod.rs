//! Scenario simulator and service front end over the whole pipeline.

mod pipeline;
mod scenario;
pub mod service;
pub mod trace;

use thiserror::Error;

use crate::trust::LedgerBlock;

pub use pipeline::Engine;
pub use scenario::{
    Credentials, DeviceDecl, DeviceKind, EngineConfig, EventKind, Phase, Scenario, ScenarioEvent, UserAction,
    UserDecl,
};
pub use trace::{Stage, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: undeclared {kind} {id}")]
    UnresolvedReference { kind: String, id: String, line: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Io(String),
}

pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub ledger: Vec<LedgerBlock>,
}

impl RunOutput {
    pub fn trace_jsonl(&self) -> String {
        trace::to_jsonl(&self.trace)
    }

    pub fn ledger_jsonl(&self) -> String {
        let mut buf = Vec::new();
        crate::trust::chain::export_jsonl(&self.ledger, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// Drives every event through the pipeline in simulated time.
pub fn run(scenario: &Scenario, seed: Option<u64>) -> Result<RunOutput, HarnessError> {
    let mut engine = Engine::new(scenario, seed.unwrap_or(scenario.seed))?;
    for e in &scenario.events {
        engine.handle(e);
    }
    Ok(RunOutput {
        trace: engine.take_trace(),
        ledger: engine.ledger().blocks().to_vec(),
    })
}
