//! Word-level tokenizer over a closed vocabulary.
//!
//! Words are whitespace-separated; the vocabulary is frozen at build time so
//! subject spans always align with whole words. Id 0 is reserved for the
//! end-of-sequence marker.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// End-of-sequence marker word.
pub const EOS_WORD: &str = "</s>";

/// Token id of [`EOS_WORD`].
pub const EOS_ID: u32 = 0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the distinct words of `corpus`, sorted for
    /// determinism. The EOS marker always takes id 0.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut distinct: Vec<String> = corpus
            .into_iter()
            .flat_map(|line| line.split_whitespace())
            .filter(|w| *w != EOS_WORD)
            .map(|w| w.to_string())
            .collect();
        distinct.sort();
        distinct.dedup();
        let mut words = Vec::with_capacity(distinct.len() + 1);
        words.push(EOS_WORD.to_string());
        words.extend(distinct);
        let mut vocab = Vocabulary { words, index: BTreeMap::new() };
        vocab.rebuild_index();
        vocab
    }

    /// Reconstructs a vocabulary from a persisted word list.
    pub fn from_words(words: Vec<String>) -> Result<Vocabulary> {
        if words.first().map(|w| w.as_str()) != Some(EOS_WORD) {
            return Err(Error::Format(format!(
                "vocabulary must start with the EOS marker '{}'",
                EOS_WORD
            )));
        }
        let mut vocab = Vocabulary { words, index: BTreeMap::new() };
        vocab.rebuild_index();
        if vocab.index.len() != vocab.words.len() {
            return Err(Error::Format("vocabulary contains duplicate words".into()));
        }
        Ok(vocab)
    }

    /// Restores the word→id index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Encodes text into token ids; unknown words are an input error naming
    /// the offending word.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| Error::input(format!("word '{}' is not in the vocabulary", w)))
            })
            .collect()
    }

    /// Decodes ids back into a whitespace-joined string.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.word_of(id)
                    .ok_or_else(|| Error::input(format!("token id {} out of range", id)))
            })
            .collect();
        Ok(words?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_vocabulary_word_round_trips() {
        let vocab = Vocabulary::build(["alice buys coffee", "bob adopts dog"]);
        for word in vocab.words() {
            let id = vocab.id_of(word).expect("indexed");
            assert_eq!(vocab.word_of(id), Some(word.as_str()));
        }
    }

    #[test]
    fn eos_takes_id_zero() {
        let vocab = Vocabulary::build(["a b"]);
        assert_eq!(vocab.id_of(EOS_WORD), Some(EOS_ID));
    }

    #[test]
    fn unknown_word_names_the_word() {
        let vocab = Vocabulary::build(["a b"]);
        let err = vocab.encode("a zebra").unwrap_err();
        assert!(err.to_string().contains("zebra"), "{err}");
    }

    #[test]
    fn build_is_deterministic_regardless_of_corpus_order() {
        let v1 = Vocabulary::build(["b a", "c"]);
        let v2 = Vocabulary::build(["c", "a b"]);
        assert_eq!(v1.words(), v2.words());
    }
}
