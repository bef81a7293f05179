//! Deterministic mock verifier: a rule table plus a hash fallback.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{PlausibilityScore, VerifierBackend};
use crate::error::{Error, Result};

/// Pure function of the statement text: listed statements score their rule
/// value, everything else a salted hash mapped into [0, 1). Stable across
/// runs and processes.
#[derive(Debug, Clone, Default)]
pub struct MockVerifier {
    rules: BTreeMap<String, f64>,
    salt: u64,
}

impl MockVerifier {
    pub fn new(rules: BTreeMap<String, f64>) -> MockVerifier {
        MockVerifier { rules, salt: 0 }
    }

    pub fn with_salt(mut self, salt: u64) -> MockVerifier {
        self.salt = salt;
        self
    }

    pub fn insert_rule(&mut self, statement: impl Into<String>, score: f64) {
        self.rules.insert(statement.into(), score);
    }

    /// Loads a JSON map statement → score.
    pub fn from_rules_file(path: impl AsRef<Path>) -> Result<MockVerifier> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let rules: BTreeMap<String, f64> = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("mock rule file parse failed: {}", e)))?;
        Ok(MockVerifier::new(rules))
    }

    pub fn rules(&self) -> &BTreeMap<String, f64> {
        &self.rules
    }

    fn hash_score(&self, statement: &str) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.salt.to_le_bytes());
        hasher.update(statement.as_bytes());
        let digest = hasher.finalize();
        let raw = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        // [0, 1): never exactly 1.0, always a valid score
        raw as f64 / (u64::MAX as f64 + 1.0)
    }
}

impl VerifierBackend for MockVerifier {
    fn kind(&self) -> &'static str {
        "mock"
    }

    fn score(&self, statements: &[String]) -> Result<Vec<PlausibilityScore>> {
        if statements.is_empty() {
            return Err(Error::input("no statements to score"));
        }
        statements
            .iter()
            .map(|s| {
                let value = self.rules.get(s).copied().unwrap_or_else(|| self.hash_score(s));
                PlausibilityScore::new(value)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_table_wins_over_the_hash() {
        let mut backend = MockVerifier::default();
        backend.insert_rule("s1", 0.9);
        let scores = backend.score(&["s1".to_string()]).unwrap();
        assert_eq!(scores[0].value(), 0.9);
    }

    #[test]
    fn order_and_arity_are_preserved() {
        let backend = MockVerifier::default();
        let statements: Vec<String> = (0..5).map(|i| format!("statement {}", i)).collect();
        let scores = backend.score(&statements).unwrap();
        assert_eq!(scores.len(), 5);
        let again = backend.score(&statements).unwrap();
        assert_eq!(scores, again);
    }

    #[test]
    fn hash_fallback_is_salted_and_in_range() {
        let a = MockVerifier::default();
        let b = MockVerifier::default().with_salt(1);
        let statement = vec!["unlisted".to_string()];
        let sa = a.score(&statement).unwrap()[0].value();
        let sb = b.score(&statement).unwrap()[0].value();
        assert!((0.0..1.0).contains(&sa));
        assert!((0.0..1.0).contains(&sb));
        assert_ne!(sa, sb);
    }

    #[test]
    fn out_of_range_rule_is_a_protocol_error() {
        let mut backend = MockVerifier::default();
        backend.insert_rule("bad", 1.5);
        let err = backend.score(&["bad".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn rules_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        std::fs::write(&path, r#"{"alpha": 0.25, "beta": 0.75}"#).unwrap();
        let backend = MockVerifier::from_rules_file(&path).unwrap();
        let scores = backend
            .score(&["alpha".to_string(), "beta".to_string()])
            .unwrap();
        assert_eq!(scores[0].value(), 0.25);
        assert_eq!(scores[1].value(), 0.75);
    }
}
