//! Synthetic desk-scale experiment fixtures.
//!
//! A fixture bundles everything one editing experiment needs: a fact corpus
//! to memorize (some facts deliberately wrong), a ground-truth store, a
//! hypernym lexicon for the conceptualizer, and a mock verifier rule table
//! that scores correct statements high and flipped ones low.
//!
//! Two layouts matter:
//!
//! - flipped facts with unique subjects and objects (edit efficacy and
//!   locality measurement);
//! - concept groups: several instances of one concept trained wrong under a
//!   shared subject, where only the first instance has ground truth in the
//!   train split, siblings get edited via instantiation, and the remaining
//!   instances are held out as generalization probes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use super::PipelineConfig;
use crate::conceptualizer::LexiconBackend;
use crate::error::{Error, Result};
use crate::model::{train_toy, ModelConfig, ToyModel, TrainReport};
use crate::store::{save as save_store, KnowledgeStore, Split, Triple, TripleSource};
use crate::verifier::{render_statement, MockVerifier, StatementTemplates};

const RELATION_CYCLE: [&str; 5] = ["xNeed", "xWant", "xAttr", "xEffect", "xReact"];

/// Shape of a generated experiment.
#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub seed: u64,
    /// Concept groups (shared subject, instances of one concept).
    pub groups: usize,
    /// Trained-wrong instances per group that get edited: the first is the
    /// store-backed original, the rest are reached via instantiation.
    pub edited_per_group: usize,
    /// Trained-wrong instances per group held out as generalization probes.
    pub probes_per_group: usize,
    /// Trained-wrong facts with unique subjects/objects, edited directly.
    pub unique_flipped: usize,
    /// Correct-trained facts in the train split.
    pub correct_train: usize,
    /// Correct-trained facts in the test split (locality holdouts).
    pub correct_test: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl FixtureSpec {
    /// Edit-efficacy layout: 200 memorized facts, 50 flipped, 150 holdouts.
    pub fn efficacy(seed: u64) -> FixtureSpec {
        FixtureSpec {
            seed,
            groups: 0,
            edited_per_group: 0,
            probes_per_group: 0,
            unique_flipped: 50,
            correct_train: 0,
            correct_test: 150,
            epochs: 40,
            learning_rate: 2e-3,
        }
    }

    /// Conceptualization-ablation layout with held-out probes.
    pub fn ablation(seed: u64) -> FixtureSpec {
        FixtureSpec {
            seed,
            groups: 5,
            edited_per_group: 5,
            probes_per_group: 3,
            unique_flipped: 0,
            correct_train: 5,
            correct_test: 10,
            epochs: 60,
            learning_rate: 2e-3,
        }
    }

    /// Small smoke-test layout for fast runs.
    pub fn smoke(seed: u64) -> FixtureSpec {
        FixtureSpec {
            seed,
            groups: 2,
            edited_per_group: 3,
            probes_per_group: 2,
            unique_flipped: 4,
            correct_train: 4,
            correct_test: 6,
            epochs: 60,
            learning_rate: 2e-3,
        }
    }
}

/// One ground-truth fact plus how it was trained.
#[derive(Debug, Clone)]
pub struct FixtureFact {
    pub head: String,
    pub relation: String,
    pub correct_tail: String,
    /// Tail the corpus actually teaches; differs from `correct_tail` for
    /// flipped facts.
    pub trained_tail: String,
    pub split: Option<Split>,
}

/// A fully assembled experiment.
pub struct DeskFixture {
    pub spec: FixtureSpec,
    pub corpus: Vec<String>,
    pub store: KnowledgeStore,
    pub lexicon_map: BTreeMap<String, Vec<String>>,
    pub rules: BTreeMap<String, f64>,
    pub config: PipelineConfig,
    pub model_config: ModelConfig,
    pub facts: Vec<FixtureFact>,
    /// Heads of directly edited facts (store-backed corrections).
    pub flipped_heads: Vec<String>,
    /// Heads of held-out generalization probes.
    pub probe_heads: Vec<String>,
    /// Heads of untouched test facts (locality holdouts).
    pub holdout_heads: Vec<String>,
}

/// Paths written by [`DeskFixture::write_files`].
pub struct FixturePaths {
    pub corpus: PathBuf,
    pub store: PathBuf,
    pub lexicon: PathBuf,
    pub rules: PathBuf,
    pub config: PathBuf,
}

struct WordBank {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordBank {
    fn new(seed: u64) -> WordBank {
        WordBank {
            rng: <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x776f7264),
            used: RELATION_CYCLE.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Pronounceable pseudo-word, unique within the fixture.
    fn word(&mut self) -> String {
        const CONSONANTS: [&str; 14] =
            ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
        const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
        loop {
            let syllables = 2 + rand::Rng::random_range(&mut self.rng, 0..2usize);
            let mut word = String::new();
            for _ in 0..syllables {
                word.push_str(CONSONANTS[rand::Rng::random_range(&mut self.rng, 0..CONSONANTS.len())]);
                word.push_str(VOWELS[rand::Rng::random_range(&mut self.rng, 0..VOWELS.len())]);
            }
            if self.used.insert(word.clone()) {
                return word;
            }
        }
    }

    fn words(&mut self, count: usize) -> Vec<String> {
        (0..count).map(|_| self.word()).collect()
    }
}

impl DeskFixture {
    pub fn build(spec: FixtureSpec) -> Result<DeskFixture> {
        if spec.groups > 0 && spec.edited_per_group < 1 {
            return Err(Error::input("edited_per_group must be >= 1 when groups exist"));
        }
        let mut bank = WordBank::new(spec.seed);
        let templates = StatementTemplates::default();
        let mut corpus = Vec::new();
        let mut store = KnowledgeStore::default();
        let mut lexicon_map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut rules: BTreeMap<String, f64> = BTreeMap::new();
        let mut facts: Vec<FixtureFact> = Vec::new();
        let mut flipped_heads = Vec::new();
        let mut probe_heads = Vec::new();
        let mut holdout_heads = Vec::new();

        // shared tail pool so every correct tail also occurs in the corpus
        let tail_pool = bank.words(6);
        let mut tail_cycle = tail_pool.iter().cycle();
        let mut relation_cycle = RELATION_CYCLE.iter().cycle();

        let add_rules = |rules: &mut BTreeMap<String, f64>,
                             head: &str,
                             relation: &str,
                             correct: &str,
                             wrong: Option<&str>|
         -> Result<()> {
            let good = (head.to_string(), relation.to_string(), correct.to_string());
            rules.insert(render_statement(&good, &templates)?, 0.9);
            if let Some(wrong) = wrong {
                let bad = (head.to_string(), relation.to_string(), wrong.to_string());
                rules.insert(render_statement(&bad, &templates)?, 0.1);
            }
            Ok(())
        };

        // --- concept groups -------------------------------------------
        for _ in 0..spec.groups {
            let name = bank.word();
            let verb = bank.word();
            let concept = bank.word();
            let relation = relation_cycle.next().expect("cycle").to_string();
            let correct = tail_cycle.next().expect("cycle").clone();
            let wrong = bank.word();
            let mut instances = bank.words(spec.edited_per_group + spec.probes_per_group);
            instances.sort(); // instantiation consumes instances alphabetically

            for (idx, object) in instances.iter().enumerate() {
                let head = format!("{} {} {}", name, verb, object);
                corpus.push(format!("{} {} {}", head, relation, wrong));
                add_rules(&mut rules, &head, &relation, &correct, Some(&wrong))?;
                lexicon_map.insert(object.clone(), vec![concept.clone()]);
                let fact = FixtureFact {
                    head: head.clone(),
                    relation: relation.clone(),
                    correct_tail: correct.clone(),
                    trained_tail: wrong.clone(),
                    split: if idx == 0 {
                        Some(Split::Train)
                    } else if idx >= spec.edited_per_group {
                        Some(Split::Test)
                    } else {
                        None
                    },
                };
                match fact.split {
                    Some(Split::Train) => {
                        store.insert_triple(Triple::new(
                            &fact.head,
                            &fact.relation,
                            &fact.correct_tail,
                            TripleSource::Dataset,
                            Split::Train,
                        )?)?;
                        flipped_heads.push(head.clone());
                    }
                    Some(Split::Test) => {
                        store.insert_triple(Triple::new(
                            &fact.head,
                            &fact.relation,
                            &fact.correct_tail,
                            TripleSource::Dataset,
                            Split::Test,
                        )?)?;
                        probe_heads.push(head.clone());
                    }
                    None => {} // sibling: edited via instantiation only
                }
                facts.push(fact);
            }
            // the concept-level fact is trained wrong too, so the concept
            // token is in-vocabulary and the concept edit is meaningful
            let concept_head = format!("{} {} {}", name, verb, concept);
            corpus.push(format!("{} {} {}", concept_head, relation, wrong));
            add_rules(&mut rules, &concept_head, &relation, &correct, Some(&wrong))?;
            facts.push(FixtureFact {
                head: concept_head,
                relation: relation.clone(),
                correct_tail: correct.clone(),
                trained_tail: wrong,
                split: None,
            });
        }

        // --- unique flipped facts ---------------------------------------
        for _ in 0..spec.unique_flipped {
            let head = format!("{} {} {}", bank.word(), bank.word(), bank.word());
            let relation = relation_cycle.next().expect("cycle").to_string();
            let correct = tail_cycle.next().expect("cycle").clone();
            let wrong = bank.word();
            corpus.push(format!("{} {} {}", head, relation, wrong));
            add_rules(&mut rules, &head, &relation, &correct, Some(&wrong))?;
            store.insert_triple(Triple::new(
                &head,
                &relation,
                &correct,
                TripleSource::Dataset,
                Split::Train,
            )?)?;
            flipped_heads.push(head.clone());
            facts.push(FixtureFact {
                head,
                relation,
                correct_tail: correct,
                trained_tail: wrong,
                split: Some(Split::Train),
            });
        }

        // --- correct-trained fillers -------------------------------------
        for (count, split) in
            [(spec.correct_train, Split::Train), (spec.correct_test, Split::Test)]
        {
            for _ in 0..count {
                let head = format!("{} {} {}", bank.word(), bank.word(), bank.word());
                let relation = relation_cycle.next().expect("cycle").to_string();
                let correct = tail_cycle.next().expect("cycle").clone();
                corpus.push(format!("{} {} {}", head, relation, correct));
                add_rules(&mut rules, &head, &relation, &correct, None)?;
                store.insert_triple(Triple::new(
                    &head,
                    &relation,
                    &correct,
                    TripleSource::Dataset,
                    split,
                )?)?;
                if split == Split::Test {
                    holdout_heads.push(head.clone());
                }
                facts.push(FixtureFact {
                    head,
                    relation,
                    correct_tail: correct.clone(),
                    trained_tail: correct,
                    split: Some(split),
                });
            }
        }

        let model_config = ModelConfig::desk_default(spec.seed);
        let vocab_estimate: BTreeSet<&str> =
            corpus.iter().flat_map(|s| s.split_whitespace()).collect();
        if vocab_estimate.len() + 1 > model_config.vocab_size {
            return Err(Error::input(format!(
                "fixture vocabulary {} exceeds the model cap {}",
                vocab_estimate.len() + 1,
                model_config.vocab_size
            )));
        }

        let mut config = PipelineConfig::default();
        config.seed = spec.seed;
        config.mock_salt = spec.seed;
        config.edit_method = "memit".into();
        config.value_gradient = "analytic".into();
        config.value_steps = 25;
        config.k_abs = 1;
        config.k_inst = spec.edited_per_group.saturating_sub(1).max(1);
        config.probe_extra = spec.probes_per_group.max(1);
        config.conceptualization_enabled = spec.groups > 0;

        Ok(DeskFixture {
            spec,
            corpus,
            store,
            lexicon_map,
            rules,
            config,
            model_config,
            facts,
            flipped_heads,
            probe_heads,
            holdout_heads,
        })
    }

    pub fn verifier(&self) -> MockVerifier {
        MockVerifier::new(self.rules.clone()).with_salt(self.config.mock_salt)
    }

    pub fn concept_backend(&self) -> Result<LexiconBackend> {
        LexiconBackend::new(self.lexicon_map.clone())
    }

    /// Trains the toy model on the fixture corpus.
    pub fn train(&self) -> Result<(ToyModel, TrainReport)> {
        train_toy(&self.corpus, &self.model_config, self.spec.epochs, self.spec.learning_rate)
    }

    /// Writes corpus, store, lexicon, mock rules, and config files; the
    /// config points at the sibling files so the CLI can run offline.
    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<FixturePaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let paths = FixturePaths {
            corpus: dir.join("corpus.txt"),
            store: dir.join("store.jsonl"),
            lexicon: dir.join("lexicon.json"),
            rules: dir.join("mock_rules.json"),
            config: dir.join("conke.toml"),
        };
        std::fs::write(&paths.corpus, self.corpus.join("\n") + "\n")
            .map_err(|e| Error::io(paths.corpus.display().to_string(), e))?;
        save_store(&self.store, &paths.store)?;
        std::fs::write(
            &paths.lexicon,
            serde_json::to_string_pretty(&self.lexicon_map).expect("lexicon serializes"),
        )
        .map_err(|e| Error::io(paths.lexicon.display().to_string(), e))?;
        std::fs::write(
            &paths.rules,
            serde_json::to_string_pretty(&self.rules).expect("rules serialize"),
        )
        .map_err(|e| Error::io(paths.rules.display().to_string(), e))?;
        let mut config = self.config.clone();
        config.lexicon_path = paths.lexicon.display().to_string();
        config.mock_rules_path = paths.rules.display().to_string();
        std::fs::write(&paths.config, config.to_toml_string())
            .map_err(|e| Error::io(paths.config.display().to_string(), e))?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_fixture_has_consistent_shape() {
        let fixture = DeskFixture::build(FixtureSpec::smoke(3)).unwrap();
        // groups: 2 * (3 edited + 2 probes + 1 concept) = 12 sentences,
        // plus 4 flipped + 4 correct train + 6 correct test
        assert_eq!(fixture.corpus.len(), 26);
        assert_eq!(fixture.flipped_heads.len(), 2 + 4, "group originals + unique flips");
        assert_eq!(fixture.probe_heads.len(), 4);
        assert_eq!(fixture.holdout_heads.len(), 6);
        // probes and edits never share heads
        for probe in &fixture.probe_heads {
            assert!(!fixture.flipped_heads.contains(probe));
        }
        fixture.store.integrity_check().unwrap();
        // every store truth has a corpus sentence teaching something for it
        assert!(fixture.store.triple_count() >= fixture.flipped_heads.len());
    }

    #[test]
    fn fixtures_are_seed_deterministic() {
        let a = DeskFixture::build(FixtureSpec::smoke(9)).unwrap();
        let b = DeskFixture::build(FixtureSpec::smoke(9)).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.rules, b.rules);
        let c = DeskFixture::build(FixtureSpec::smoke(10)).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn efficacy_layout_matches_the_desk_defaults() {
        let fixture = DeskFixture::build(FixtureSpec::efficacy(1)).unwrap();
        assert_eq!(fixture.corpus.len(), 200);
        assert_eq!(fixture.flipped_heads.len(), 50);
        assert_eq!(fixture.holdout_heads.len(), 150);
        assert!(fixture.probe_heads.is_empty());
    }

    #[test]
    fn files_round_trip_through_the_loaders() {
        let fixture = DeskFixture::build(FixtureSpec::smoke(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture.write_files(dir.path()).unwrap();
        let store = crate::store::load(&paths.store).unwrap();
        assert_eq!(store.triple_count(), fixture.store.triple_count());
        let config = PipelineConfig::from_toml_file(&paths.config).unwrap();
        assert_eq!(config.seed, fixture.config.seed);
        config.build_verifier(true).unwrap();
        config.build_concept_backend(true).unwrap();
    }
}
