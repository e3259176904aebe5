//! Trace records: one JSON object per line, totally ordered.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "ingest")]
    Ingest,
    #[serde(rename = "qoc")]
    Qoc,
    #[serde(rename = "infer")]
    Infer,
    #[serde(rename = "risk")]
    Risk,
    #[serde(rename = "publish")]
    Publish,
    #[serde(rename = "select")]
    Select,
    #[serde(rename = "plan")]
    Plan,
    #[serde(rename = "enforce-step")]
    EnforceStep,
    #[serde(rename = "ledger")]
    Ledger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    pub stage: Stage,
    pub outcome: String,
    pub payload: serde_json::Value,
}

pub fn write_jsonl<W: Write>(records: &[TraceRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn parse_jsonl(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
