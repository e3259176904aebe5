//! Condition language shared by classifier rules, the threat catalog and
//! label patterns.

use serde::{Deserialize, Serialize};

/// Reserved condition key that addresses the high-level context label.
pub const LABEL_KEY: &str = "@label";

/// A glob over context labels (`*`, `?`, `[...]`). `"*"` matches everything.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelPattern(String);

impl LabelPattern {
    pub fn new(pattern: impl Into<String>) -> Result<Self, glob::PatternError> {
        let s = pattern.into();
        compile(&s)?;
        Ok(Self(s))
    }

    pub fn any() -> Self {
        Self("*".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_wildcard(&self) -> bool {
        !self.0.is_empty() && self.0.chars().all(|c| c == '*')
    }

    /// True when the pattern contains glob metacharacters.
    pub fn is_glob(&self) -> bool {
        self.0.contains(['*', '?', '['])
    }

    /// Count of literal (non-metacharacter) characters; a specificity measure.
    pub fn literal_len(&self) -> usize {
        self.0.chars().filter(|c| !matches!(c, '*' | '?' | '[' | ']')).count()
    }

    pub fn matches(&self, label: &str) -> bool {
        glob_match(&self.0, label)
    }
}

impl Default for LabelPattern {
    fn default() -> Self {
        Self::any()
    }
}

impl std::fmt::Display for LabelPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for LabelPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for LabelPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LabelPattern::new(s).map_err(serde::de::Error::custom)
    }
}

/// Labels have no path separators, so a run of stars means the same as one
/// star. The glob crate would reject `**` next to other characters.
fn compile(pattern: &str) -> Result<glob::Pattern, glob::PatternError> {
    let mut collapsed = String::with_capacity(pattern.len());
    for c in pattern.chars() {
        if !(c == '*' && collapsed.ends_with('*')) {
            collapsed.push(c);
        }
    }
    glob::Pattern::new(&collapsed)
}

pub fn glob_match(pattern: &str, text: &str) -> bool {
    match compile(pattern) {
        Ok(p) => p.matches(text),
        Err(_) => pattern == text,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Eq,
    Ne,
    In,
    Glob,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    One(String),
    Many(Vec<String>),
}

impl Operand {
    fn values(&self) -> &[String] {
        match self {
            Operand::One(s) => std::slice::from_ref(s),
            Operand::Many(v) => v,
        }
    }
}

/// `{key, op, value}`; `key` may be [`LABEL_KEY`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub key: String,
    pub op: Op,
    pub value: Operand,
}

impl Condition {
    pub fn eq(key: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            op: Op::Eq,
            value: Operand::One(value.into()),
        }
    }

    /// Evaluates against a lookup. Absent keys never satisfy a condition.
    pub fn holds<'a>(&self, lookup: impl Fn(&str) -> Option<&'a str>) -> bool {
        let Some(actual) = lookup(&self.key) else {
            return false;
        };
        let values = self.value.values();
        match self.op {
            Op::Eq => values.len() == 1 && values[0] == actual,
            Op::Ne => !values.iter().any(|v| v == actual),
            Op::In => values.iter().any(|v| v == actual),
            Op::Glob => values.iter().any(|v| glob_match(v, actual)),
        }
    }
}
