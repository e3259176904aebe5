//! ID3-style decision tree over categorical attributes, flattened to rules.
//!
//! Tie-breaks: equal information gain goes to the smaller attribute name;
//! equal leaf majorities go to the smaller label. Leaf confidence is purity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Classifier, Rule};
use crate::predicate::Condition;

const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub entries: BTreeMap<String, String>,
    pub label: String,
}

pub fn train(examples: &[TrainingExample]) -> Result<Classifier, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut rules = Vec::new();
    let all: Vec<&TrainingExample> = examples.iter().collect();
    grow(&all, &mut Vec::new(), &mut rules);
    Ok(Classifier { rules })
}

fn label_counts<'a>(examples: &[&'a TrainingExample]) -> BTreeMap<&'a str, usize> {
    let mut counts = BTreeMap::new();
    for e in examples {
        *counts.entry(e.label.as_str()).or_insert(0) += 1;
    }
    counts
}

fn entropy(examples: &[&TrainingExample]) -> f64 {
    let n = examples.len() as f64;
    label_counts(examples)
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn partition<'a>(
    examples: &[&'a TrainingExample],
    attr: &str,
) -> BTreeMap<String, Vec<&'a TrainingExample>> {
    let mut parts: BTreeMap<String, Vec<&TrainingExample>> = BTreeMap::new();
    for e in examples {
        parts.entry(e.entries[attr].clone()).or_default().push(e);
    }
    parts
}

fn grow(examples: &[&TrainingExample], path: &mut Vec<Condition>, rules: &mut Vec<Rule>) {
    let counts = label_counts(examples);
    // BTreeMap iterates labels in order; keep the first maximum.
    let (majority, top) = counts
        .iter()
        .fold(("", 0usize), |acc, (l, &c)| if c > acc.1 { (l, c) } else { acc });

    // Candidate attributes: present in every example here, not yet on the
    // path, and still taking more than one value.
    let on_path: BTreeSet<&str> = path.iter().map(|c| c.key.as_str()).collect();
    let mut candidates: BTreeSet<&str> = examples[0].entries.keys().map(String::as_str).collect();
    for e in &examples[1..] {
        candidates.retain(|k| e.entries.contains_key(*k));
    }
    candidates.retain(|k| !on_path.contains(k));
    candidates.retain(|k| {
        let first = &examples[0].entries[*k];
        examples.iter().any(|e| &e.entries[*k] != first)
    });

    if counts.len() == 1 || candidates.is_empty() {
        rules.push(Rule {
            label: majority.to_string(),
            confidence: top as f64 / examples.len() as f64,
            conditions: path.clone(),
        });
        return;
    }

    let base = entropy(examples);
    let n = examples.len() as f64;
    let mut best: Option<(&str, f64)> = None;
    for attr in candidates {
        let remainder: f64 = partition(examples, attr)
            .values()
            .map(|part| part.len() as f64 / n * entropy(part))
            .sum();
        let gain = base - remainder;
        if best.map_or(true, |(_, g)| gain > g + GAIN_EPS) {
            best = Some((attr, gain));
        }
    }
    let (attr, _) = best.expect("at least one candidate");
    for (value, part) in partition(examples, attr) {
        path.push(Condition::eq(attr, value));
        grow(&part, path, rules);
        path.pop();
    }
}
