//! User preference management.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DisseminationError;
use crate::mechanisms::privacy::PrivacyTransform;
use crate::predicate::LabelPattern;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_auth_factors: Option<u8>,
    /// Privacy transform the user requires per attribute.
    #[serde(default)]
    pub privacy: BTreeMap<String, PrivacyTransform>,
    #[serde(default)]
    pub consent: BTreeMap<String, bool>,
}

/// A user's preferences: a default entry plus overrides keyed by exact
/// context label or by label glob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSet {
    pub user_id: String,
    #[serde(default)]
    pub default: PreferenceEntry,
    #[serde(default)]
    pub contexts: BTreeMap<String, PreferenceEntry>,
}

impl PreferenceSet {
    pub fn new(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            default: PreferenceEntry::default(),
            contexts: BTreeMap::new(),
        }
    }

    /// Most specific match: exact label, then the glob with the most
    /// literal characters (ties by pattern text), then the default.
    pub fn slice_for(&self, label: &str) -> PreferenceSlice {
        if let Some(e) = self.contexts.get(label) {
            return PreferenceSlice::new(&self.user_id, label, e);
        }
        let best = self
            .contexts
            .iter()
            .filter_map(|(sel, e)| {
                let p = LabelPattern::new(sel.as_str()).ok()?;
                (p.is_glob() && p.matches(label)).then_some((p, e))
            })
            .min_by(|(a, _), (b, _)| {
                b.literal_len()
                    .cmp(&a.literal_len())
                    .then_with(|| a.as_str().cmp(b.as_str()))
            });
        match best {
            Some((p, e)) => PreferenceSlice::new(&self.user_id, p.as_str(), e),
            None => PreferenceSlice::new(&self.user_id, DEFAULT_SELECTOR, &self.default),
        }
    }
}

pub const DEFAULT_SELECTOR: &str = "default";

/// The preferences applicable to one context event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSlice {
    pub user_id: String,
    /// Selector that matched: the exact label, a glob, or `"default"`.
    pub matched: String,
    #[serde(flatten)]
    pub entry: PreferenceEntry,
}

impl PreferenceSlice {
    fn new(user: &str, matched: &str, entry: &PreferenceEntry) -> Self {
        Self {
            user_id: user.to_string(),
            matched: matched.to_string(),
            entry: entry.clone(),
        }
    }
}

/// A change to one selector's entry. `null` privacy values remove a transform.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDelta {
    #[serde(default = "default_selector")]
    pub selector: String,
    #[serde(default)]
    pub min_auth_factors: Option<u8>,
    #[serde(default)]
    pub privacy: BTreeMap<String, Option<PrivacyTransform>>,
    #[serde(default)]
    pub consent: BTreeMap<String, bool>,
}

fn default_selector() -> String {
    DEFAULT_SELECTOR.into()
}

impl PreferenceDelta {
    pub fn is_empty(&self) -> bool {
        self.min_auth_factors.is_none() && self.privacy.is_empty() && self.consent.is_empty()
    }

    fn apply_to(&self, e: &mut PreferenceEntry) {
        if let Some(n) = self.min_auth_factors {
            e.min_auth_factors = Some(n);
        }
        for (attr, t) in &self.privacy {
            match t {
                Some(t) => {
                    e.privacy.insert(attr.clone(), t.clone());
                }
                None => {
                    e.privacy.remove(attr);
                }
            }
        }
        for (flag, v) in &self.consent {
            e.consent.insert(flag.clone(), *v);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PreferenceStore {
    users: BTreeMap<String, PreferenceSet>,
}

impl PreferenceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: PreferenceSet) {
        self.users.insert(set.user_id.clone(), set);
    }

    pub fn contains(&self, user: &str) -> bool {
        self.users.contains_key(user)
    }

    pub fn get(&self, user: &str) -> Option<&PreferenceSet> {
        self.users.get(user)
    }

    pub fn get_preferences(&self, user: &str, label: &str) -> Result<PreferenceSlice, DisseminationError> {
        self.users
            .get(user)
            .map(|p| p.slice_for(label))
            .ok_or_else(|| DisseminationError::UnknownUser(user.to_string()))
    }

    pub fn update_preferences(
        &mut self,
        user: &str,
        delta: &PreferenceDelta,
    ) -> Result<PreferenceSet, DisseminationError> {
        let set = self
            .users
            .get_mut(user)
            .ok_or_else(|| DisseminationError::UnknownUser(user.to_string()))?;
        if !delta.is_empty() {
            let entry = if delta.selector == DEFAULT_SELECTOR {
                &mut set.default
            } else {
                set.contexts.entry(delta.selector.clone()).or_default()
            };
            delta.apply_to(entry);
        }
        Ok(set.clone())
    }
}
