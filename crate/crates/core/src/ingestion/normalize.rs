//! Normalization tables: raw sensor values to canonical context values.
//!
//! Tables are data, loaded from a JSON object keyed by attribute name.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ContextValue, IngestError, RawValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geofence {
    pub name: String,
    /// Vertices as `[lat, lon]` pairs in degrees; the ring closes implicitly.
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// Exclusive upper bound; `None` is unbounded.
    #[serde(default)]
    pub below: Option<f64>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourBand {
    pub from_hour: f64,
    pub label: String,
}

/// One normalization rule per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormalizationRule {
    /// First fence (in table order) containing the point wins.
    Geofence {
        fences: Vec<Geofence>,
        outside: String,
    },
    /// SSID → tag → network class.
    Ssid {
        ssids: BTreeMap<String, String>,
        classes: BTreeMap<String, String>,
    },
    /// Ordered bands over a non-negative scalar.
    Threshold {
        #[serde(default)]
        unit: Option<String>,
        bands: Vec<Band>,
    },
    /// Hour-of-day (number) or "HH:MM" (string) bucketed by ascending start hours.
    TimeOfDay { bands: Vec<HourBand> },
    /// Numeric passthrough within bounds.
    Numeric {
        unit: String,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    Categorical { values: BTreeSet<String> },
}

impl NormalizationRule {
    /// Returns the canonical value and its unit.
    pub fn apply(
        &self,
        attribute: &str,
        raw: &RawValue,
    ) -> Result<(ContextValue, Option<String>), IngestError> {
        let fail = || IngestError::UnnormalizableValue {
            attribute: attribute.to_string(),
            raw: raw.to_string(),
        };
        match self {
            NormalizationRule::Geofence { fences, outside } => {
                let RawValue::Geo { lat, lon } = raw else {
                    return Err(fail());
                };
                if !lat.is_finite() || !lon.is_finite() {
                    return Err(fail());
                }
                let name = fences
                    .iter()
                    .find(|f| point_in_polygon(*lat, *lon, &f.polygon))
                    .map_or(outside, |f| &f.name);
                Ok((ContextValue::Label(name.clone()), None))
            }
            NormalizationRule::Ssid { ssids, classes } => {
                let RawValue::Text(ssid) = raw else {
                    return Err(fail());
                };
                let class = ssids
                    .get(ssid)
                    .and_then(|tag| classes.get(tag))
                    .ok_or_else(fail)?;
                Ok((ContextValue::Label(class.clone()), None))
            }
            NormalizationRule::Threshold { unit, bands } => {
                let RawValue::Number(v) = raw else {
                    return Err(fail());
                };
                if !v.is_finite() || *v < 0.0 {
                    return Err(fail());
                }
                let band = bands
                    .iter()
                    .find(|b| b.below.map_or(true, |u| *v < u))
                    .ok_or_else(fail)?;
                Ok((ContextValue::Label(band.label.clone()), unit.clone()))
            }
            NormalizationRule::TimeOfDay { bands } => {
                let hour = match raw {
                    RawValue::Number(h) => *h,
                    RawValue::Text(s) => parse_hh_mm(s).ok_or_else(fail)?,
                    RawValue::Geo { .. } => return Err(fail()),
                };
                if !(0.0..24.0).contains(&hour) {
                    return Err(fail());
                }
                let band = bands
                    .iter()
                    .filter(|b| b.from_hour <= hour)
                    .max_by(|a, b| a.from_hour.total_cmp(&b.from_hour))
                    .ok_or_else(fail)?;
                Ok((ContextValue::Label(band.label.clone()), None))
            }
            NormalizationRule::Numeric { unit, min, max } => {
                let RawValue::Number(v) = raw else {
                    return Err(fail());
                };
                let in_range = v.is_finite()
                    && min.map_or(true, |m| *v >= m)
                    && max.map_or(true, |m| *v <= m);
                if !in_range {
                    return Err(fail());
                }
                Ok((ContextValue::Number(*v), Some(unit.clone())))
            }
            NormalizationRule::Categorical { values } => {
                let RawValue::Text(s) = raw else {
                    return Err(fail());
                };
                if values.contains(s) {
                    Ok((ContextValue::Label(s.clone()), None))
                } else {
                    Err(fail())
                }
            }
        }
    }

    /// Closed label vocabulary of the rule; `None` for numeric keys.
    pub fn vocabulary(&self) -> Option<BTreeSet<String>> {
        match self {
            NormalizationRule::Geofence { fences, outside } => Some(
                fences
                    .iter()
                    .map(|f| f.name.clone())
                    .chain(std::iter::once(outside.clone()))
                    .collect(),
            ),
            NormalizationRule::Ssid { classes, .. } => Some(classes.values().cloned().collect()),
            NormalizationRule::Threshold { bands, .. } => {
                Some(bands.iter().map(|b| b.label.clone()).collect())
            }
            NormalizationRule::TimeOfDay { bands } => {
                Some(bands.iter().map(|b| b.label.clone()).collect())
            }
            NormalizationRule::Numeric { .. } => None,
            NormalizationRule::Categorical { values } => Some(values.clone()),
        }
    }
}

fn parse_hh_mm(s: &str) -> Option<f64> {
    let (h, m) = s.split_once(':')?;
    let h: u32 = h.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (h < 24 && m < 60).then(|| h as f64 + m as f64 / 60.0)
}

/// Even-odd ray casting in the (lon, lat) plane.
pub fn point_in_polygon(lat: f64, lon: f64, polygon: &[[f64; 2]]) -> bool {
    let n = polygon.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let [yi, xi] = polygon[i];
        let [yj, xj] = polygon[j];
        if (yi > lat) != (yj > lat) && lon < (xj - xi) * (lat - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// All normalization rules, keyed by attribute name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationTables {
    pub rules: BTreeMap<String, NormalizationRule>,
}

impl NormalizationTables {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn normalize(
        &self,
        attribute: &str,
        raw: &RawValue,
    ) -> Result<(ContextValue, Option<String>), IngestError> {
        let rule = self
            .rules
            .get(attribute)
            .ok_or_else(|| IngestError::UnnormalizableValue {
                attribute: attribute.to_string(),
                raw: raw.to_string(),
            })?;
        rule.apply(attribute, raw)
    }
}
