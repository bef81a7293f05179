//! Persistent knowledge store: triples, abstractions, links, scores, and
//! edit records, with ATOMIC-style ingestion.
//!
//! Single-writer, multi-reader. The in-memory store is the snapshot;
//! [`save`]/[`load`] move it through a JSON-lines file with a version header.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::editors::EditRecord;
use crate::error::{Error, Result};
use crate::ids::{content_id, normalize_ws};
use crate::relations::RelationRegistry;
use crate::verifier::{PlausibilityScore, Renderable};

pub const STORE_FORMAT_VERSION: &str = "conke-store-v1";

/// Where a triple came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripleSource {
    Dataset,
    Generated,
    Conceptualized,
    Instantiated,
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One commonsense fact. The id is a content hash of the normalized
/// (head, relation, tail), so identical facts share an id everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub id: String,
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: TripleSource,
    pub score: Option<PlausibilityScore>,
    pub split: Split,
}

impl Triple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
        source: TripleSource,
        split: Split,
    ) -> Result<Triple> {
        let head = head.into();
        let relation = relation.into();
        let tail = tail.into();
        if normalize_ws(&head).is_empty() {
            return Err(Error::input("triple head is empty"));
        }
        if normalize_ws(&tail).is_empty() {
            return Err(Error::input("triple tail is empty"));
        }
        let id = Triple::content_id(&head, &relation, &tail);
        Ok(Triple { id, head, relation, tail, source, score: None, split })
    }

    pub fn content_id(head: &str, relation: &str, tail: &str) -> String {
        content_id(&["t", head, relation, tail])
    }

    pub fn with_score(mut self, score: PlausibilityScore) -> Triple {
        self.score = Some(score);
        self
    }
}

impl Renderable for Triple {
    fn head(&self) -> &str {
        &self.head
    }
    fn relation(&self) -> &str {
        &self.relation
    }
    fn tail(&self) -> &str {
        &self.tail
    }
}

/// Concept-level fact abstracted from one or more instance triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractTriple {
    pub id: String,
    pub head_concept: String,
    pub relation: String,
    pub tail: String,
    /// Instance triples this abstraction was derived from; never empty.
    pub derived_from: Vec<String>,
}

impl AbstractTriple {
    pub fn new(
        head_concept: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
        derived_from: Vec<String>,
    ) -> Result<AbstractTriple> {
        let head_concept = head_concept.into();
        let relation = relation.into();
        let tail = tail.into();
        if derived_from.is_empty() {
            return Err(Error::input("abstract triple needs at least one source"));
        }
        if normalize_ws(&head_concept).is_empty() || normalize_ws(&tail).is_empty() {
            return Err(Error::input("abstract triple head/tail is empty"));
        }
        let id = AbstractTriple::content_id(&head_concept, &relation, &tail);
        Ok(AbstractTriple { id, head_concept, relation, tail, derived_from })
    }

    pub fn content_id(head_concept: &str, relation: &str, tail: &str) -> String {
        content_id(&["a", head_concept, relation, tail])
    }
}

impl Renderable for AbstractTriple {
    fn head(&self) -> &str {
        &self.head_concept
    }
    fn relation(&self) -> &str {
        &self.relation
    }
    fn tail(&self) -> &str {
        &self.tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkDirection {
    Abstracted,
    Instantiated,
}

/// Provenance edge between an instance triple and a concept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptLink {
    pub instance_id: String,
    pub concept_id: String,
    pub direction: LinkDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestFormat {
    Jsonl,
    Tsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub added: usize,
    pub duplicates: usize,
    pub malformed: usize,
}

/// Conjunctive query filters; unset fields match everything.
#[derive(Debug, Clone, Default)]
pub struct TripleFilter {
    pub head: Option<String>,
    pub relation: Option<String>,
    pub source: Option<TripleSource>,
    pub split: Option<Split>,
    /// Half-open score range `(low, high]`; unscored triples never match.
    pub score_range: Option<(f64, f64)>,
    /// Matches triples linked to this concept in either direction.
    pub linked_concept: Option<String>,
}

/// The in-memory store; also the snapshot that `save`/`load` persist.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeStore {
    relations: RelationRegistry,
    triples: BTreeMap<String, Triple>,
    abstract_triples: BTreeMap<String, AbstractTriple>,
    links: BTreeSet<ConceptLink>,
    edit_records: Vec<EditRecord>,
}

impl Default for KnowledgeStore {
    fn default() -> Self {
        KnowledgeStore::new(RelationRegistry::default())
    }
}

impl KnowledgeStore {
    pub fn new(relations: RelationRegistry) -> KnowledgeStore {
        KnowledgeStore {
            relations,
            triples: BTreeMap::new(),
            abstract_triples: BTreeMap::new(),
            links: BTreeSet::new(),
            edit_records: Vec::new(),
        }
    }

    pub fn relations(&self) -> &RelationRegistry {
        &self.relations
    }

    pub fn relations_mut(&mut self) -> &mut RelationRegistry {
        &mut self.relations
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn abstract_count(&self) -> usize {
        self.abstract_triples.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn record_count(&self) -> usize {
        self.edit_records.len()
    }

    pub fn triple(&self, id: &str) -> Option<&Triple> {
        self.triples.get(id)
    }

    pub fn abstract_triple(&self, id: &str) -> Option<&AbstractTriple> {
        self.abstract_triples.get(id)
    }

    pub fn abstract_triples(&self) -> impl Iterator<Item = &AbstractTriple> {
        self.abstract_triples.values()
    }

    pub fn edit_records(&self) -> &[EditRecord] {
        &self.edit_records
    }

    pub fn links(&self) -> impl Iterator<Item = &ConceptLink> {
        self.links.iter()
    }

    /// Inserts a triple; returns false when the id already exists
    /// (content-level deduplication).
    pub fn insert_triple(&mut self, triple: Triple) -> Result<bool> {
        if !self.relations.contains(&triple.relation) {
            return Err(Error::input(format!(
                "relation '{}' is not registered",
                triple.relation
            )));
        }
        if self.triples.contains_key(&triple.id) {
            return Ok(false);
        }
        self.triples.insert(triple.id.clone(), triple);
        Ok(true)
    }

    /// Inserts an abstraction; duplicate content merges provenance.
    pub fn insert_abstract(&mut self, abs: AbstractTriple) -> Result<bool> {
        if !self.relations.contains(&abs.relation) {
            return Err(Error::input(format!("relation '{}' is not registered", abs.relation)));
        }
        for source in &abs.derived_from {
            if !self.triples.contains_key(source) {
                return Err(Error::Integrity(format!(
                    "abstract triple derives from unknown triple {}",
                    source
                )));
            }
        }
        match self.abstract_triples.get_mut(&abs.id) {
            Some(existing) => {
                for source in abs.derived_from {
                    if !existing.derived_from.contains(&source) {
                        existing.derived_from.push(source);
                    }
                }
                Ok(false)
            }
            None => {
                self.abstract_triples.insert(abs.id.clone(), abs);
                Ok(true)
            }
        }
    }

    /// Records a provenance link; both endpoints must exist.
    pub fn link(
        &mut self,
        instance_id: &str,
        concept_id: &str,
        direction: LinkDirection,
    ) -> Result<bool> {
        if !self.triples.contains_key(instance_id) {
            return Err(Error::Integrity(format!("link instance {} not in store", instance_id)));
        }
        if !self.abstract_triples.contains_key(concept_id) {
            return Err(Error::Integrity(format!("link concept {} not in store", concept_id)));
        }
        Ok(self.links.insert(ConceptLink {
            instance_id: instance_id.to_string(),
            concept_id: concept_id.to_string(),
            direction,
        }))
    }

    pub fn set_score(&mut self, id: &str, score: PlausibilityScore) -> Result<()> {
        match self.triples.get_mut(id) {
            Some(triple) => {
                triple.score = Some(score);
                Ok(())
            }
            None => Err(Error::input(format!("no triple with id {}", id))),
        }
    }

    pub fn add_edit_record(&mut self, record: EditRecord) -> Result<()> {
        record.validate()?;
        self.edit_records.push(record);
        Ok(())
    }

    /// Instances linked to a concept, ascending by id.
    pub fn instances_of(&self, concept_id: &str) -> Vec<&Triple> {
        let mut ids: Vec<&str> = self
            .links
            .iter()
            .filter(|l| l.concept_id == concept_id)
            .map(|l| l.instance_id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        ids.iter().filter_map(|id| self.triples.get(*id)).collect()
    }

    /// Replaces a triple's tail, producing a corrected triple under a new
    /// content id, and re-points all links. Returns the new id.
    pub fn correct_triple(&mut self, id: &str, new_tail: &str) -> Result<String> {
        let old = self
            .triples
            .get(id)
            .ok_or_else(|| Error::input(format!("no triple with id {}", id)))?
            .clone();
        let corrected = Triple::new(
            old.head.clone(),
            old.relation.clone(),
            new_tail,
            TripleSource::Corrected,
            old.split,
        )?;
        let new_id = corrected.id.clone();
        if new_id == old.id {
            return Ok(new_id); // tail unchanged after normalization
        }
        self.triples.insert(new_id.clone(), corrected);
        let moved: Vec<ConceptLink> = self
            .links
            .iter()
            .filter(|l| l.instance_id == old.id)
            .cloned()
            .collect();
        for link in moved {
            self.links.remove(&link);
            self.links.insert(ConceptLink {
                instance_id: new_id.clone(),
                concept_id: link.concept_id,
                direction: link.direction,
            });
        }
        // abstraction provenance follows the corrected instance
        for abs in self.abstract_triples.values_mut() {
            for source in abs.derived_from.iter_mut() {
                if *source == old.id {
                    *source = new_id.clone();
                }
            }
        }
        self.triples.remove(&old.id);
        Ok(new_id)
    }

    /// Conjunctive filter query in ascending id order.
    pub fn query(&self, filter: &TripleFilter) -> Vec<&Triple> {
        let linked: Option<BTreeSet<&str>> = filter.linked_concept.as_ref().map(|concept| {
            self.links
                .iter()
                .filter(|l| &l.concept_id == concept)
                .map(|l| l.instance_id.as_str())
                .collect()
        });
        self.triples
            .values()
            .filter(|t| {
                filter
                    .head
                    .as_deref()
                    .is_none_or(|h| normalize_ws(h) == normalize_ws(&t.head))
            })
            .filter(|t| filter.relation.as_deref().is_none_or(|r| r == t.relation))
            .filter(|t| filter.source.is_none_or(|s| s == t.source))
            .filter(|t| filter.split.is_none_or(|s| s == t.split))
            .filter(|t| {
                filter.score_range.is_none_or(|(low, high)| {
                    t.score
                        .map(|s| s.value() > low && s.value() <= high)
                        .unwrap_or(false)
                })
            })
            .filter(|t| linked.as_ref().is_none_or(|ids| ids.contains(t.id.as_str())))
            .collect()
    }

    /// Ingests head/relation/tail rows; deduplicates by content id and skips
    /// malformed rows, counting both.
    pub fn ingest(
        &mut self,
        path: impl AsRef<Path>,
        format: IngestFormat,
        split: Split,
    ) -> Result<IngestReport> {
        let file = fs::File::open(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        let mut report = IngestReport { added: 0, duplicates: 0, malformed: 0 };
        let mut saw_valid_row = false;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields = match format {
                IngestFormat::Tsv => {
                    let cols: Vec<&str> = line.split('\t').collect();
                    if cols.len() < 3 {
                        report.malformed += 1;
                        continue;
                    }
                    (cols[0].to_string(), cols[1].to_string(), cols[2].to_string())
                }
                IngestFormat::Jsonl => {
                    #[derive(Deserialize)]
                    struct Row {
                        head: String,
                        relation: String,
                        tail: String,
                    }
                    match serde_json::from_str::<Row>(&line) {
                        Ok(row) => (row.head, row.relation, row.tail),
                        Err(_) => {
                            report.malformed += 1;
                            continue;
                        }
                    }
                }
            };
            let (head, relation, tail) = fields;
            if !self.relations.contains(&relation) {
                report.malformed += 1;
                continue;
            }
            let triple = match Triple::new(head, relation, tail, TripleSource::Dataset, split) {
                Ok(t) => t,
                Err(_) => {
                    report.malformed += 1;
                    continue;
                }
            };
            saw_valid_row = true;
            if self.insert_triple(triple)? {
                report.added += 1;
            } else {
                report.duplicates += 1;
            }
        }
        if !saw_valid_row {
            return Err(Error::input(format!(
                "no valid rows in {} ({} malformed)",
                path.as_ref().display(),
                report.malformed
            )));
        }
        Ok(report)
    }

    /// Verifies referential integrity, listing every dangling id.
    pub fn integrity_check(&self) -> Result<()> {
        let mut dangling = Vec::new();
        for link in &self.links {
            if !self.triples.contains_key(&link.instance_id) {
                dangling.push(format!("link instance {}", link.instance_id));
            }
            if !self.abstract_triples.contains_key(&link.concept_id) {
                dangling.push(format!("link concept {}", link.concept_id));
            }
        }
        for abs in self.abstract_triples.values() {
            if abs.derived_from.is_empty() {
                dangling.push(format!("abstract {} has no sources", abs.id));
            }
            for source in &abs.derived_from {
                if !self.triples.contains_key(source) {
                    dangling.push(format!("abstract {} source {}", abs.id, source));
                }
            }
        }
        if dangling.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity(format!("dangling references: {}", dangling.join(", "))))
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record {
    Meta { format_version: String, relations: Vec<String> },
    Triple(Triple),
    Abstract(AbstractTriple),
    Link(ConceptLink),
    EditRecord(EditRecord),
}

/// Writes the store as JSON lines: a meta header, then one record per line.
pub fn save(store: &KnowledgeStore, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    let mut write = |record: &Record| -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(file, "{}", line).map_err(|e| Error::io(path.as_ref().display().to_string(), e))
    };
    write(&Record::Meta {
        format_version: STORE_FORMAT_VERSION.to_string(),
        relations: store.relations.iter().map(|s| s.to_string()).collect(),
    })?;
    for triple in store.triples.values() {
        write(&Record::Triple(triple.clone()))?;
    }
    for abs in store.abstract_triples.values() {
        write(&Record::Abstract(abs.clone()))?;
    }
    for link in &store.links {
        write(&Record::Link(link.clone()))?;
    }
    for record in &store.edit_records {
        write(&Record::EditRecord(record.clone()))?;
    }
    Ok(())
}

/// Loads a store, checking the format version and referential integrity.
pub fn load(path: impl AsRef<Path>) -> Result<KnowledgeStore> {
    let file = fs::File::open(path.as_ref())
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("store file is empty".into()))?
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
    let meta: Record = serde_json::from_str(&header)
        .map_err(|e| Error::Format(format!("store header parse failed: {}", e)))?;
    let mut store = match meta {
        Record::Meta { format_version, relations } => {
            if format_version != STORE_FORMAT_VERSION {
                return Err(Error::Format(format!(
                    "store version '{}' does not match '{}'",
                    format_version, STORE_FORMAT_VERSION
                )));
            }
            let mut registry = RelationRegistry::empty();
            for tag in relations {
                registry.register(tag);
            }
            KnowledgeStore::new(registry)
        }
        _ => return Err(Error::Format("store file must start with a meta record".into())),
    };
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("store line {}: {}", lineno + 2, e)))?;
        match record {
            Record::Meta { .. } => {
                return Err(Error::Format(format!(
                    "unexpected meta record at line {}",
                    lineno + 2
                )))
            }
            Record::Triple(triple) => {
                store.triples.insert(triple.id.clone(), triple);
            }
            Record::Abstract(abs) => {
                store.abstract_triples.insert(abs.id.clone(), abs);
            }
            Record::Link(link) => {
                store.links.insert(link);
            }
            Record::EditRecord(record) => store.edit_records.push(record),
        }
    }
    store.integrity_check()?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::PlausibilityScore;

    fn triple(head: &str, relation: &str, tail: &str) -> Triple {
        Triple::new(head, relation, tail, TripleSource::Dataset, Split::Train).unwrap()
    }

    #[test]
    fn content_id_is_whitespace_normalized_and_case_preserving() {
        let a = triple("PersonX  buys a   coffee", "xNeed", "money");
        let b = triple("PersonX buys a coffee", "xNeed", "money");
        let c = triple("personx buys a coffee", "xNeed", "money");
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, c.id);
    }

    #[test]
    fn tsv_ingest_deduplicates_and_skips_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.tsv");
        std::fs::write(
            &path,
            "PersonX buys a coffee\txNeed\tmoney\nPersonX buys a coffee\txNeed\tmoney\nPersonX sings\txEffect\t\nonly-two\tcolumns\n",
        )
        .unwrap();
        let mut store = KnowledgeStore::default();
        let report = store.ingest(&path, IngestFormat::Tsv, Split::Train).unwrap();
        assert_eq!(report.added, 1);
        assert_eq!(report.duplicates, 1);
        assert_eq!(report.malformed, 2);
        // second ingest adds nothing
        let again = store.ingest(&path, IngestFormat::Tsv, Split::Train).unwrap();
        assert_eq!(again.added, 0);
        assert_eq!(store.triple_count(), 1);
    }

    #[test]
    fn jsonl_ingest_and_zero_valid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        std::fs::write(&path, "{\"not\": \"a triple\"}\ngarbage\n").unwrap();
        let mut store = KnowledgeStore::default();
        let err = store.ingest(&path, IngestFormat::Jsonl, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Input(_)));

        std::fs::write(
            &path,
            "{\"head\": \"PersonX naps\", \"relation\": \"xEffect\", \"tail\": \"rests\"}\n",
        )
        .unwrap();
        let report = store.ingest(&path, IngestFormat::Jsonl, Split::Test).unwrap();
        assert_eq!(report.added, 1);
    }

    #[test]
    fn query_filters_conjunctively_in_ascending_id_order() {
        let mut store = KnowledgeStore::default();
        for (head, relation, tail, score) in [
            ("a walks", "xEffect", "tires", 0.9),
            ("b runs", "xEffect", "sweats", 0.4),
            ("c naps", "xWant", "quiet", 0.5),
        ] {
            let t = triple(head, relation, tail).with_score(PlausibilityScore::new(score).unwrap());
            store.insert_triple(t).unwrap();
        }
        let all = store.query(&TripleFilter::default());
        let returned: Vec<&str> = all.iter().map(|t| t.id.as_str()).collect();
        let mut sorted = returned.clone();
        sorted.sort();
        assert_eq!(returned, sorted, "ascending id order");

        let effects = store.query(&TripleFilter {
            relation: Some("xEffect".into()),
            ..TripleFilter::default()
        });
        assert_eq!(effects.len(), 2);

        // (0, 0.5] matches exactly the classify-implausible scores under D1
        let implausible = store.query(&TripleFilter {
            score_range: Some((0.0, 0.5)),
            ..TripleFilter::default()
        });
        assert_eq!(implausible.len(), 2);

        let empty = KnowledgeStore::default();
        assert!(empty.query(&TripleFilter::default()).is_empty());
    }

    #[test]
    fn links_require_existing_endpoints() {
        let mut store = KnowledgeStore::default();
        let t = triple("PersonX buys a coffee", "xNeed", "money");
        let tid = t.id.clone();
        store.insert_triple(t).unwrap();
        let abs = AbstractTriple::new(
            "PersonX buys a beverage",
            "xNeed",
            "money",
            vec![tid.clone()],
        )
        .unwrap();
        let aid = abs.id.clone();
        store.insert_abstract(abs).unwrap();
        assert!(store.link(&tid, &aid, LinkDirection::Abstracted).unwrap());
        assert!(
            !store.link(&tid, &aid, LinkDirection::Abstracted).unwrap(),
            "no duplicate links"
        );
        assert!(store.link("missing", &aid, LinkDirection::Abstracted).is_err());
        assert_eq!(store.instances_of(&aid).len(), 1);
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let mut store = KnowledgeStore::default();
        let t1 = triple("PersonX buys a coffee", "xNeed", "money")
            .with_score(PlausibilityScore::new(0.93).unwrap());
        let t1_id = t1.id.clone();
        store.insert_triple(t1).unwrap();
        store.insert_triple(triple("PersonX sings", "xAttr", "musical")).unwrap();
        let abs =
            AbstractTriple::new("PersonX buys a beverage", "xNeed", "money", vec![t1_id.clone()])
                .unwrap();
        let aid = abs.id.clone();
        store.insert_abstract(abs).unwrap();
        store.link(&t1_id, &aid, LinkDirection::Abstracted).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(store, loaded);
    }

    #[test]
    fn empty_store_round_trips() {
        let store = KnowledgeStore::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        save(&store, &path).unwrap();
        assert_eq!(load(&path).unwrap(), store);
    }

    #[test]
    fn tampered_link_is_an_integrity_error() {
        let mut store = KnowledgeStore::default();
        let t = triple("PersonX buys a coffee", "xNeed", "money");
        let tid = t.id.clone();
        store.insert_triple(t).unwrap();
        let abs =
            AbstractTriple::new("PersonX buys a beverage", "xNeed", "money", vec![tid.clone()])
                .unwrap();
        let aid = abs.id.clone();
        store.insert_abstract(abs).unwrap();
        store.link(&tid, &aid, LinkDirection::Abstracted).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        save(&store, &path).unwrap();
        // corrupt the id only inside the link record
        let tampered: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(|line| {
                if line.contains("\"type\":\"link\"") {
                    line.replace(&tid, "deadbeef00000000")
                } else {
                    line.to_string()
                }
            })
            .collect();
        std::fs::write(&path, tampered.join("\n")).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
        assert!(err.to_string().contains("deadbeef00000000"));
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        std::fs::write(
            &path,
            "{\"type\":\"meta\",\"format_version\":\"conke-store-v0\",\"relations\":[]}\n",
        )
        .unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn correct_triple_relinks_and_removes_the_old_fact() {
        let mut store = KnowledgeStore::default();
        let t = triple("PersonX buys a coffee", "xNeed", "sleep");
        let tid = t.id.clone();
        store.insert_triple(t).unwrap();
        let abs =
            AbstractTriple::new("PersonX buys a beverage", "xNeed", "money", vec![tid.clone()])
                .unwrap();
        let aid = abs.id.clone();
        store.insert_abstract(abs).unwrap();
        store.link(&tid, &aid, LinkDirection::Abstracted).unwrap();

        let new_id = store.correct_triple(&tid, "money").unwrap();
        assert_ne!(new_id, tid);
        assert!(store.triple(&tid).is_none());
        let corrected = store.triple(&new_id).unwrap();
        assert_eq!(corrected.tail, "money");
        assert_eq!(corrected.source, TripleSource::Corrected);
        store.integrity_check().unwrap();
        assert_eq!(store.instances_of(&aid).len(), 1);
    }
}
