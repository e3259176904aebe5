use std::collections::BTreeMap;

use super::{IngestError, LowLevelContext};
use crate::Millis;

/// Context Information Base: append-only store of low-level context.
#[derive(Debug, Clone, Default)]
pub struct ContextInformationBase {
    records: Vec<LowLevelContext>,
    by_key: BTreeMap<String, Vec<usize>>,
}

impl ContextInformationBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: LowLevelContext) -> usize {
        let idx = self.records.len();
        self.by_key.entry(record.key.clone()).or_default().push(idx);
        self.records.push(record);
        idx
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[LowLevelContext] {
        &self.records
    }

    /// Records of `key` observed in the closed window `[t0, t1]`, ordered by
    /// `(observed_at, source)`; insertion order breaks remaining ties.
    pub fn query(&self, key: &str, t0: Millis, t1: Millis) -> Result<Vec<LowLevelContext>, IngestError> {
        if t0 > t1 {
            return Err(IngestError::InvalidWindow { t0, t1 });
        }
        let mut out: Vec<LowLevelContext> = self
            .by_key
            .get(key)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
            .filter(|r| (t0..=t1).contains(&r.observed_at))
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            a.observed_at
                .cmp(&b.observed_at)
                .then_with(|| a.source.cmp(&b.source))
        });
        Ok(out)
    }

    /// Most recent record of `key` at or before `t` from any of `sources`.
    pub fn latest<'a, F>(&'a self, key: &str, t: Millis, mut source_ok: F) -> Option<&'a LowLevelContext>
    where
        F: FnMut(&str) -> bool,
    {
        self.by_key
            .get(key)?
            .iter()
            .map(|&i| &self.records[i])
            .filter(|r| r.observed_at <= t && source_ok(&r.source))
            .max_by(|a, b| {
                a.observed_at
                    .cmp(&b.observed_at)
                    .then_with(|| b.source.cmp(&a.source))
            })
    }
}
