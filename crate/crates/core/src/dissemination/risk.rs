//! Risk assessment against a threat catalog.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::predicate::{Condition, LABEL_KEY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThreatPredicate {
    One(Condition),
    All(Vec<Condition>),
}

impl ThreatPredicate {
    fn conditions(&self) -> &[Condition] {
        match self {
            ThreatPredicate::One(c) => std::slice::from_ref(c),
            ThreatPredicate::All(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatEntry {
    pub id: String,
    pub when: ThreatPredicate,
    pub severity: f64,
}

impl ThreatEntry {
    pub fn matches(&self, label: &str, values: &BTreeMap<String, String>) -> bool {
        self.when.conditions().iter().all(|c| {
            c.holds(|k| {
                if k == LABEL_KEY {
                    Some(label)
                } else {
                    values.get(k).map(String::as_str)
                }
            })
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThreatCatalog {
    pub threats: Vec<ThreatEntry>,
}

impl ThreatCatalog {
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for t in &self.threats {
            if !seen.insert(&t.id) {
                return Err(format!("duplicate threat id {}", t.id));
            }
            if !(0.0..=1.0).contains(&t.severity) {
                return Err(format!("threat {}: severity must lie in [0, 1]", t.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
    Critical,
}

impl RiskLevel {
    /// low < 0.25 ≤ medium < 0.5 ≤ high < 0.8 ≤ critical
    pub fn from_score(score: f64) -> Self {
        if score >= 0.8 {
            RiskLevel::Critical
        } else if score >= 0.5 {
            RiskLevel::High
        } else if score >= 0.25 {
            RiskLevel::Medium
        } else {
            RiskLevel::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub score: f64,
    pub level: RiskLevel,
    pub matched: BTreeSet<String>,
}

/// `score = 1 - Π (1 - severity)` over matched threats, taken in id order.
pub fn assess_risk(label: &str, values: &BTreeMap<String, String>, catalog: &ThreatCatalog) -> RiskAssessment {
    let matched: BTreeMap<&str, f64> = catalog
        .threats
        .iter()
        .filter(|t| t.matches(label, values))
        .map(|t| (t.id.as_str(), t.severity.clamp(0.0, 1.0)))
        .collect();
    let survive: f64 = matched.values().map(|s| 1.0 - s).product();
    let score = (1.0 - survive).clamp(0.0, 1.0);
    RiskAssessment {
        score,
        level: RiskLevel::from_score(score),
        matched: matched.keys().map(|s| s.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> ThreatCatalog {
        serde_json::from_str(
            r#"[
            {"id":"unsecured_network","when":{"key":"network","op":"eq","value":"public_wifi"},"severity":0.5},
            {"id":"eavesdropping","when":[{"key":"@label","op":"glob","value":"at_public_*"}],"severity":0.5},
            {"id":"device_capture","when":{"key":"location","op":"eq","value":"hostile"},"severity":1.0}
        ]"#,
        )
        .unwrap()
    }

    fn vals(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn garden_is_high_risk() {
        let r = assess_risk("at_public_garden", &vals(&[("network", "public_wifi")]), &catalog());
        assert_eq!(r.score, 0.75);
        assert_eq!(r.level, RiskLevel::High);
        assert_eq!(r.matched.len(), 2);
    }

    #[test]
    fn nothing_matched_is_low() {
        let r = assess_risk("at_home", &vals(&[("network", "home_wifi")]), &catalog());
        assert_eq!(r.score, 0.0);
        assert_eq!(r.level, RiskLevel::Low);
        assert!(r.matched.is_empty());
    }

    #[test]
    fn full_severity_absorbs() {
        let r = assess_risk(
            "at_public_garden",
            &vals(&[("network", "public_wifi"), ("location", "hostile")]),
            &catalog(),
        );
        assert_eq!(r.score, 1.0);
        assert_eq!(r.level, RiskLevel::Critical);
    }

    #[test]
    fn bucket_edges_are_exact() {
        assert_eq!(RiskLevel::from_score(0.0), RiskLevel::Low);
        assert_eq!(RiskLevel::from_score(0.249_999), RiskLevel::Low);
        assert_eq!(RiskLevel::from_score(0.25), RiskLevel::Medium);
        assert_eq!(RiskLevel::from_score(0.5), RiskLevel::High);
        assert_eq!(RiskLevel::from_score(0.8), RiskLevel::Critical);
    }

    #[test]
    fn catalog_validation() {
        let mut c = catalog();
        assert!(c.validate().is_ok());
        c.threats[0].severity = 1.5;
        assert!(c.validate().is_err());
        let mut c = catalog();
        c.threats[1].id = "unsecured_network".into();
        assert!(c.validate().is_err());
    }
}
