//! Deterministic lexicon backend: a term → hypernyms map with a derived
//! inverse for instantiation.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ConceptBackend, Proposals};
use crate::error::{Error, Result};
use crate::Result as CrateResult;

/// Pure hypernym lexicon. Hypernym order within an entry is the file order;
/// the inverse map lists instances in alphabetical term order.
#[derive(Debug, Clone)]
pub struct LexiconBackend {
    hypernyms: BTreeMap<String, Vec<String>>,
    inverse: BTreeMap<String, Vec<String>>,
    /// Token index of the focus term within a head; None means the last token.
    focus_index: Option<usize>,
}

impl LexiconBackend {
    pub fn new(hypernyms: BTreeMap<String, Vec<String>>) -> Result<LexiconBackend> {
        for (term, hyps) in &hypernyms {
            if hyps.is_empty() {
                return Err(Error::input(format!("lexicon entry '{}' has no hypernyms", term)));
            }
        }
        let mut inverse: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (term, hyps) in &hypernyms {
            for hyp in hyps {
                inverse.entry(hyp.clone()).or_default().push(term.clone());
            }
        }
        Ok(LexiconBackend { hypernyms, inverse, focus_index: None })
    }

    /// JSON map `term → [hypernyms]`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<LexiconBackend> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("lexicon parse failed: {}", e)))?;
        LexiconBackend::new(map)
    }

    pub fn with_focus_index(mut self, index: Option<usize>) -> LexiconBackend {
        self.focus_index = index;
        self
    }

    pub fn hypernyms_of(&self, term: &str) -> &[String] {
        self.hypernyms.get(term).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn instances_of(&self, concept: &str) -> &[String] {
        self.inverse.get(concept).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Splits a head into (prefix words, focus word); the focus is the word
    /// the lexicon abstracts or instantiates.
    fn split_focus<'a>(&self, head: &'a str) -> Option<(Vec<&'a str>, usize)> {
        let words: Vec<&str> = head.split_whitespace().collect();
        if words.is_empty() {
            return None;
        }
        let index = self.focus_index.unwrap_or(words.len() - 1);
        if index >= words.len() {
            return None;
        }
        Some((words, index))
    }

    fn substitute(words: &[&str], index: usize, replacement: &str) -> String {
        let mut out: Vec<&str> = words.to_vec();
        out[index] = replacement;
        out.join(" ")
    }
}

impl ConceptBackend for LexiconBackend {
    fn kind(&self) -> &'static str {
        "lexicon"
    }

    fn propose_abstractions(
        &self,
        head: &str,
        _relation: &str,
        _tail: &str,
        _k_hint: usize,
    ) -> CrateResult<Proposals> {
        let Some((words, index)) = self.split_focus(head) else {
            return Ok(Proposals::default());
        };
        let heads = self
            .hypernyms_of(words[index])
            .iter()
            .map(|hyp| LexiconBackend::substitute(&words, index, hyp))
            .collect();
        Ok(Proposals { heads, skipped: 0 })
    }

    fn propose_instantiations(
        &self,
        head_concept: &str,
        _relation: &str,
        _tail: &str,
        _k_hint: usize,
    ) -> CrateResult<Proposals> {
        let Some((words, index)) = self.split_focus(head_concept) else {
            return Ok(Proposals::default());
        };
        let heads = self
            .instances_of(words[index])
            .iter()
            .map(|term| LexiconBackend::substitute(&words, index, term))
            .collect();
        Ok(Proposals { heads, skipped: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> LexiconBackend {
        let mut map = BTreeMap::new();
        map.insert("coffee".to_string(), vec!["beverage".to_string(), "drink".to_string()]);
        map.insert("tea".to_string(), vec!["beverage".to_string()]);
        map.insert("juice".to_string(), vec!["beverage".to_string()]);
        LexiconBackend::new(map).unwrap()
    }

    #[test]
    fn abstraction_replaces_the_focus_term() {
        let backend = lexicon();
        let proposals = backend
            .propose_abstractions("PersonX buys a coffee", "xNeed", "money", 2)
            .unwrap();
        assert_eq!(
            proposals.heads,
            vec!["PersonX buys a beverage", "PersonX buys a drink"]
        );
    }

    #[test]
    fn lexicon_miss_yields_empty() {
        let backend = lexicon();
        let proposals = backend
            .propose_abstractions("PersonX rides a horse", "xNeed", "saddle", 2)
            .unwrap();
        assert!(proposals.heads.is_empty());
    }

    #[test]
    fn inverse_map_lists_instances_alphabetically() {
        let backend = lexicon();
        let proposals = backend
            .propose_instantiations("PersonX buys a beverage", "xNeed", "money", 5)
            .unwrap();
        assert_eq!(
            proposals.heads,
            vec![
                "PersonX buys a coffee",
                "PersonX buys a juice",
                "PersonX buys a tea"
            ]
        );
    }

    #[test]
    fn empty_entry_is_rejected() {
        let mut map = BTreeMap::new();
        map.insert("coffee".to_string(), vec![]);
        assert!(LexiconBackend::new(map).is_err());
    }

    #[test]
    fn focus_index_is_configurable() {
        let backend = lexicon().with_focus_index(Some(0));
        let proposals = backend
            .propose_abstractions("coffee for breakfast", "xNeed", "money", 2)
            .unwrap();
        assert_eq!(
            proposals.heads,
            vec!["beverage for breakfast", "drink for breakfast"]
        );
    }
}
