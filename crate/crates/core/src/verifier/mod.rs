//! Plausibility scoring and threshold triage of commonsense statements.

mod http;
mod mock;

pub use http::{HttpVerifier, RetryPolicy, VERIFIER_URL_ENV};
pub use mock::MockVerifier;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relations::DEFAULT_RELATIONS;

/// A commonsense plausibility score in `[0, 1]`.
///
/// Out-of-range values are rejected at construction; a backend returning one
/// is a protocol error, never silently clamped.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PlausibilityScore(f64);

impl PlausibilityScore {
    pub fn new(value: f64) -> Result<PlausibilityScore> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Protocol(format!(
                "plausibility score {} outside [0, 1]",
                value
            )));
        }
        Ok(PlausibilityScore(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PlausibilityScore {
    type Error = Error;

    fn try_from(value: f64) -> Result<PlausibilityScore> {
        PlausibilityScore::new(value)
    }
}

impl From<PlausibilityScore> for f64 {
    fn from(score: PlausibilityScore) -> f64 {
        score.0
    }
}

/// Classification threshold, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Result<Threshold> {
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::input(format!("threshold {} must lie in (0, 1)", value)));
        }
        Ok(Threshold(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold(0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Plausible,
    Implausible,
}

/// Plausible iff the score is strictly above the threshold; a score exactly
/// at the threshold is implausible (erring toward re-editing).
pub fn classify(score: PlausibilityScore, threshold: Threshold) -> Classification {
    if score.value() > threshold.value() {
        Classification::Plausible
    } else {
        Classification::Implausible
    }
}

/// Relation → statement pattern table with `{head}` and `{tail}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementTemplates {
    patterns: BTreeMap<String, String>,
}

impl Default for StatementTemplates {
    fn default() -> Self {
        let defaults: [(&str, &str); 9] = [
            ("xNeed", "{head}. Before that, PersonX needed {tail}."),
            ("xIntent", "{head}. Because PersonX wanted {tail}."),
            ("xAttr", "{head}. PersonX is seen as {tail}."),
            ("xEffect", "{head}. As a result, PersonX {tail}."),
            ("xReact", "{head}. As a result, PersonX feels {tail}."),
            ("xWant", "{head}. After that, PersonX wants {tail}."),
            ("oEffect", "{head}. As a result, others {tail}."),
            ("oReact", "{head}. As a result, others feel {tail}."),
            ("oWant", "{head}. After that, others want {tail}."),
        ];
        debug_assert_eq!(defaults.len(), DEFAULT_RELATIONS.len());
        StatementTemplates {
            patterns: defaults
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl StatementTemplates {
    pub fn empty() -> StatementTemplates {
        StatementTemplates { patterns: BTreeMap::new() }
    }

    pub fn set(&mut self, relation: impl Into<String>, pattern: impl Into<String>) {
        self.patterns.insert(relation.into(), pattern.into());
    }

    pub fn pattern(&self, relation: &str) -> Option<&str> {
        self.patterns.get(relation).map(|s| s.as_str())
    }
}

/// Anything renderable as an (head, relation, tail) statement.
pub trait Renderable {
    fn head(&self) -> &str;
    fn relation(&self) -> &str;
    fn tail(&self) -> &str;
}

impl Renderable for (String, String, String) {
    fn head(&self) -> &str {
        &self.0
    }
    fn relation(&self) -> &str {
        &self.1
    }
    fn tail(&self) -> &str {
        &self.2
    }
}

/// Deterministic substitution of head and tail into the relation's pattern.
pub fn render_statement<T: Renderable>(item: &T, templates: &StatementTemplates) -> Result<String> {
    let pattern = templates.pattern(item.relation()).ok_or_else(|| {
        Error::input(format!("no statement template for relation '{}'", item.relation()))
    })?;
    Ok(pattern.replace("{head}", item.head()).replace("{tail}", item.tail()))
}

/// A plausibility scorer. Implementations must preserve input order and are
/// safe to call concurrently.
pub trait VerifierBackend: Send + Sync {
    fn kind(&self) -> &'static str;

    /// One score per statement, order-preserving.
    fn score(&self, statements: &[String]) -> Result<Vec<PlausibilityScore>>;
}

/// Exhaustive, disjoint partition of items by plausibility, with the score
/// attached to every item.
#[derive(Debug, Clone)]
pub struct Triage<T> {
    pub plausible: Vec<(T, PlausibilityScore)>,
    pub implausible: Vec<(T, PlausibilityScore)>,
}

impl<T> Triage<T> {
    pub fn total(&self) -> usize {
        self.plausible.len() + self.implausible.len()
    }
}

/// Renders, scores, and classifies every item.
pub fn triage<T: Renderable>(
    backend: &dyn VerifierBackend,
    items: Vec<T>,
    templates: &StatementTemplates,
    threshold: Threshold,
) -> Result<Triage<T>> {
    let statements: Vec<String> = items
        .iter()
        .map(|item| render_statement(item, templates))
        .collect::<Result<_>>()?;
    if statements.is_empty() {
        return Ok(Triage { plausible: vec![], implausible: vec![] });
    }
    let scores = backend.score(&statements)?;
    if scores.len() != statements.len() {
        return Err(Error::Protocol(format!(
            "backend returned {} scores for {} statements",
            scores.len(),
            statements.len()
        )));
    }
    let mut triaged = Triage { plausible: vec![], implausible: vec![] };
    for (item, score) in items.into_iter().zip(scores) {
        match classify(score, threshold) {
            Classification::Plausible => triaged.plausible.push((item, score)),
            Classification::Implausible => triaged.implausible.push((item, score)),
        }
    }
    Ok(triaged)
}
