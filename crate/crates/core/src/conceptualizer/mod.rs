//! Conceptualization and instantiation: abstract instance triples into
//! concepts, ground concepts into novel instances, and keep linked instances
//! consistent with edited concepts.

mod lexicon;
mod llm;

pub use lexicon::LexiconBackend;
pub use llm::{parse_numbered_list, LlmBackend, API_KEY_ENV, LLM_URL_ENV};

use crate::editors::EditRequest;
use crate::error::{Error, Result};
use crate::ids::normalize_ws;
use crate::model::TokenSpan;
use crate::store::{AbstractTriple, KnowledgeStore, LinkDirection, Triple, TripleSource};

/// Candidate heads proposed by a backend, plus the count of malformed lines
/// it had to skip.
#[derive(Debug, Clone, Default)]
pub struct Proposals {
    pub heads: Vec<String>,
    pub skipped: usize,
}

/// Proposes more-general or more-specific heads for a triple.
///
/// Backends return candidates in a deterministic order; the operations here
/// apply identity/novelty filtering and truncation.
pub trait ConceptBackend: Send + Sync {
    fn kind(&self) -> &'static str;

    fn propose_abstractions(
        &self,
        head: &str,
        relation: &str,
        tail: &str,
        k_hint: usize,
    ) -> Result<Proposals>;

    fn propose_instantiations(
        &self,
        head_concept: &str,
        relation: &str,
        tail: &str,
        k_hint: usize,
    ) -> Result<Proposals>;
}

/// Span covering an entire prompt (the key is read at its last token).
pub fn full_span(text: &str) -> TokenSpan {
    TokenSpan::new(0, text.split_whitespace().count().max(1))
}

/// Builds the edit request for one (head, relation, tail) fact.
///
/// The prompt conditions on the head event plus the relation tag and the
/// key span covers it entirely, so the edit is keyed at the relation token,
/// the position whose MLP output feeds the tail prediction directly.
pub fn edit_request_for(
    head: &str,
    relation: &str,
    tail: &str,
    source_triple_ids: Vec<String>,
) -> crate::error::Result<EditRequest> {
    let prompt = format!("{} {}", head, relation);
    let span = full_span(&prompt);
    EditRequest::new(prompt, span, relation, tail, source_triple_ids)
}

/// Abstracts a stored triple into at most `k` concept-level triples, writing
/// them and their provenance links into the store.
///
/// Proposals matching the source head are dropped (an abstraction must change
/// something); a lexicon miss is an empty result, not an error.
pub fn abstract_triple(
    backend: &dyn ConceptBackend,
    store: &mut KnowledgeStore,
    triple_id: &str,
    k: usize,
) -> Result<Vec<AbstractTriple>> {
    if k < 1 {
        return Err(Error::input("abstraction count k must be >= 1"));
    }
    let triple = store
        .triple(triple_id)
        .ok_or_else(|| Error::input(format!("no triple with id {}", triple_id)))?
        .clone();
    let proposals =
        backend.propose_abstractions(&triple.head, &triple.relation, &triple.tail, k)?;
    let mut out = Vec::new();
    for head_concept in proposals.heads {
        if out.len() == k {
            break;
        }
        if normalize_ws(&head_concept) == normalize_ws(&triple.head) {
            continue;
        }
        let abs = AbstractTriple::new(
            head_concept,
            triple.relation.clone(),
            triple.tail.clone(),
            vec![triple.id.clone()],
        )?;
        let abs_id = abs.id.clone();
        store.insert_abstract(abs)?;
        store.link(&triple.id, &abs_id, LinkDirection::Abstracted)?;
        out.push(store.abstract_triple(&abs_id).expect("just inserted").clone());
    }
    Ok(out)
}

/// Grounds a concept into at most `k` novel instance triples, writing them
/// and their links into the store.
///
/// Novelty: no returned instance reproduces a source the concept was derived
/// from. The instances inherit relation and tail from the concept and the
/// split of the first source.
pub fn instantiate(
    backend: &dyn ConceptBackend,
    store: &mut KnowledgeStore,
    concept_id: &str,
    k: usize,
) -> Result<Vec<Triple>> {
    if k < 1 {
        return Err(Error::input("instantiation count k must be >= 1"));
    }
    let concept = store
        .abstract_triple(concept_id)
        .ok_or_else(|| Error::input(format!("no abstract triple with id {}", concept_id)))?
        .clone();
    let mut source_heads = Vec::new();
    let mut split = None;
    for source_id in &concept.derived_from {
        let source = store.triple(source_id).ok_or_else(|| {
            Error::Integrity(format!("concept {} derives from missing {}", concept.id, source_id))
        })?;
        source_heads.push(normalize_ws(&source.head));
        split.get_or_insert(source.split);
    }
    let split = split.expect("derived_from is never empty");

    let proposals = backend.propose_instantiations(
        &concept.head_concept,
        &concept.relation,
        &concept.tail,
        k + source_heads.len(),
    )?;
    let mut out = Vec::new();
    for head in proposals.heads {
        if out.len() == k {
            break;
        }
        let normalized = normalize_ws(&head);
        if normalized == normalize_ws(&concept.head_concept) {
            continue;
        }
        if source_heads.iter().any(|s| *s == normalized) {
            continue;
        }
        let triple =
            Triple::new(head, concept.relation.clone(), concept.tail.clone(), TripleSource::Instantiated, split)?;
        let triple_id = triple.id.clone();
        store.insert_triple(triple)?;
        store.link(&triple_id, &concept.id, LinkDirection::Instantiated)?;
        out.push(store.triple(&triple_id).expect("just inserted").clone());
    }
    Ok(out)
}

/// Expands one corrected triple into edit requests: the original correction,
/// concept-level lifts, and novel instantiations, deduplicated by
/// (head, relation, tail).
///
/// `k_inst` is the total instantiation budget across all abstractions,
/// consumed in abstraction order.
pub fn augment(
    backend: &dyn ConceptBackend,
    store: &mut KnowledgeStore,
    corrected_id: &str,
    k_abs: usize,
    k_inst: usize,
) -> Result<Vec<EditRequest>> {
    let corrected = store
        .triple(corrected_id)
        .ok_or_else(|| Error::input(format!("no triple with id {}", corrected_id)))?
        .clone();
    let mut requests = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut push = |request: EditRequest, seen: &mut std::collections::BTreeSet<String>| {
        if seen.insert(request.id()) {
            requests.push(request);
        }
    };

    push(
        edit_request_for(
            &corrected.head,
            &corrected.relation,
            &corrected.tail,
            vec![corrected.id.clone()],
        )?,
        &mut seen,
    );

    if k_abs >= 1 {
        let abstractions = abstract_triple(backend, store, corrected_id, k_abs)?;
        for abs in &abstractions {
            push(
                edit_request_for(
                    &abs.head_concept,
                    &abs.relation,
                    &abs.tail,
                    vec![abs.id.clone(), corrected.id.clone()],
                )?,
                &mut seen,
            );
        }
        let mut budget = k_inst;
        for abs in &abstractions {
            if budget == 0 {
                break;
            }
            let instances = instantiate(backend, store, &abs.id, budget)?;
            for instance in instances {
                push(
                    edit_request_for(
                        &instance.head,
                        &instance.relation,
                        &instance.tail,
                        vec![instance.id.clone(), abs.id.clone()],
                    )?,
                    &mut seen,
                );
                budget -= 1;
                if budget == 0 {
                    break;
                }
            }
        }
    }
    Ok(requests)
}

/// One edit request per linked instance whose tail disagrees with the
/// concept's (whitespace-normalized); empty when everything is consistent.
pub fn propagate(store: &KnowledgeStore, concept_id: &str) -> Result<Vec<EditRequest>> {
    let concept = store
        .abstract_triple(concept_id)
        .ok_or_else(|| Error::input(format!("no abstract triple with id {}", concept_id)))?;
    let mut linked_ids: Vec<&str> = store
        .links()
        .filter(|l| l.concept_id == concept_id)
        .map(|l| l.instance_id.as_str())
        .collect();
    linked_ids.sort();
    linked_ids.dedup();
    let mut requests = Vec::new();
    for id in linked_ids {
        let instance = store
            .triple(id)
            .ok_or_else(|| Error::Integrity(format!("dangling link to instance {}", id)))?;
        if normalize_ws(&instance.tail) != normalize_ws(&concept.tail) {
            requests.push(edit_request_for(
                &instance.head,
                &instance.relation,
                &concept.tail,
                vec![instance.id.clone(), concept.id.clone()],
            )?);
        }
    }
    Ok(requests)
}

/// Applies propagation requests to the store by correcting each source
/// instance's tail. Returns the corrected triple ids.
pub fn apply_propagation(
    store: &mut KnowledgeStore,
    requests: &[EditRequest],
) -> Result<Vec<String>> {
    let mut corrected = Vec::with_capacity(requests.len());
    for request in requests {
        let instance_id = request
            .source_triple_ids
            .first()
            .ok_or_else(|| Error::input("propagation request lacks a source triple id"))?;
        corrected.push(store.correct_triple(instance_id, &request.tail)?);
    }
    Ok(corrected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Split;
    use std::collections::BTreeMap;

    fn lexicon() -> LexiconBackend {
        let mut map = BTreeMap::new();
        map.insert("coffee".into(), vec!["beverage".into(), "drink".into()]);
        map.insert("tea".into(), vec!["beverage".into()]);
        map.insert("juice".into(), vec!["beverage".into()]);
        LexiconBackend::new(map).unwrap()
    }

    fn store_with(head: &str, relation: &str, tail: &str) -> (KnowledgeStore, String) {
        let mut store = KnowledgeStore::default();
        let t = Triple::new(head, relation, tail, TripleSource::Dataset, Split::Train).unwrap();
        let id = t.id.clone();
        store.insert_triple(t).unwrap();
        (store, id)
    }

    #[test]
    fn abstraction_writes_concepts_with_provenance() {
        let backend = lexicon();
        let (mut store, id) = store_with("PersonX buys a coffee", "xNeed", "money");
        let abstractions = abstract_triple(&backend, &mut store, &id, 2).unwrap();
        assert_eq!(abstractions.len(), 2);
        assert_eq!(abstractions[0].head_concept, "PersonX buys a beverage");
        assert_eq!(abstractions[1].head_concept, "PersonX buys a drink");
        for abs in &abstractions {
            assert_eq!(abs.derived_from, vec![id.clone()]);
        }
        assert_eq!(store.link_count(), 2);
        store.integrity_check().unwrap();
    }

    #[test]
    fn abstraction_truncates_to_k_in_lexicon_order() {
        let backend = lexicon();
        let (mut store, id) = store_with("PersonX buys a coffee", "xNeed", "money");
        let abstractions = abstract_triple(&backend, &mut store, &id, 1).unwrap();
        assert_eq!(abstractions.len(), 1);
        assert_eq!(abstractions[0].head_concept, "PersonX buys a beverage");
    }

    #[test]
    fn lexicon_miss_is_an_empty_result() {
        let backend = lexicon();
        let (mut store, id) = store_with("PersonX rides a horse", "xNeed", "saddle");
        let abstractions = abstract_triple(&backend, &mut store, &id, 3).unwrap();
        assert!(abstractions.is_empty());
    }

    #[test]
    fn instantiation_excludes_sources_and_links_everything() {
        let backend = lexicon();
        let (mut store, id) = store_with("PersonX buys a coffee", "xNeed", "money");
        let abstractions = abstract_triple(&backend, &mut store, &id, 1).unwrap();
        let concept_id = abstractions[0].id.clone();
        let instances = instantiate(&backend, &mut store, &concept_id, 2).unwrap();
        let heads: Vec<&str> = instances.iter().map(|t| t.head.as_str()).collect();
        // coffee is excluded by the novelty rule; alphabetical inverse order
        assert_eq!(heads, vec!["PersonX buys a juice", "PersonX buys a tea"]);
        for instance in &instances {
            assert_eq!(instance.source, TripleSource::Instantiated);
            let linked = store.query(&crate::store::TripleFilter {
                linked_concept: Some(concept_id.clone()),
                ..Default::default()
            });
            assert!(linked.iter().any(|t| t.id == instance.id));
        }
    }

    #[test]
    fn instantiation_returns_all_available_without_padding() {
        let backend = lexicon();
        let (mut store, id) = store_with("PersonX buys a coffee", "xNeed", "money");
        let abstractions = abstract_triple(&backend, &mut store, &id, 1).unwrap();
        let instances = instantiate(&backend, &mut store, &abstractions[0].id, 10).unwrap();
        assert_eq!(instances.len(), 2, "tea and juice only");
    }

    #[test]
    fn augment_counts_and_dedups() {
        let backend = lexicon();
        let (mut store, id) = store_with("PersonX buys a coffee", "xNeed", "money");
        // degenerate: no conceptualization
        let only = augment(&backend, &mut store, &id, 0, 0).unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].prompt, "PersonX buys a coffee");

        // 1 original + 1 abstraction + 2 instantiations
        let (mut store, id) = store_with("PersonX buys a coffee", "xNeed", "money");
        let requests = augment(&backend, &mut store, &id, 1, 2).unwrap();
        assert_eq!(requests.len(), 4);
        let ids: std::collections::BTreeSet<String> = requests.iter().map(|r| r.id()).collect();
        assert_eq!(ids.len(), 4, "no duplicate (head, relation, tail) keys");
    }

    #[test]
    fn propagate_filters_consistent_instances_and_reaches_a_fixpoint() {
        let backend = lexicon();
        let (mut store, id) = store_with("PersonX buys a coffee", "xNeed", "money");
        let abstractions = abstract_triple(&backend, &mut store, &id, 1).unwrap();
        let concept_id = abstractions[0].id.clone();
        instantiate(&backend, &mut store, &concept_id, 2).unwrap();
        // make one linked instance stale
        let stale = Triple::new(
            "PersonX buys a cola",
            "xNeed",
            "sleep",
            TripleSource::Generated,
            Split::Train,
        )
        .unwrap();
        let stale_id = stale.id.clone();
        store.insert_triple(stale).unwrap();
        store.link(&stale_id, &concept_id, LinkDirection::Instantiated).unwrap();

        let requests = propagate(&store, &concept_id).unwrap();
        assert_eq!(requests.len(), 1, "only the stale instance needs a request");
        assert_eq!(requests[0].tail, "money");

        apply_propagation(&mut store, &requests).unwrap();
        let after = propagate(&store, &concept_id).unwrap();
        assert!(after.is_empty(), "fixpoint after applying the output");
        store.integrity_check().unwrap();
    }

    #[test]
    fn propagate_on_a_concept_with_no_links_is_empty() {
        let mut store = KnowledgeStore::default();
        let t = Triple::new("h", "xNeed", "t", TripleSource::Dataset, Split::Train).unwrap();
        let tid = t.id.clone();
        store.insert_triple(t).unwrap();
        let abs = AbstractTriple::new("h2", "xNeed", "t", vec![tid]).unwrap();
        let aid = abs.id.clone();
        store.insert_abstract(abs).unwrap();
        assert!(propagate(&store, &aid).unwrap().is_empty());
    }
}
