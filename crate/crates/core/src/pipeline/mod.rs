//! The closed editing loop: generate → verify → augment → edit → re-verify,
//! plus the evaluation metrics (edit success, locality, generalization,
//! drift) and the conceptualization ablation.

mod config;
pub mod fixtures;
mod report;

pub use config::PipelineConfig;
pub use report::{RunReport, StageCounts};

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::conceptualizer::{
    apply_propagation, augment, edit_request_for, propagate, ConceptBackend,
};
use crate::editors::{
    apply_adapter, estimate_covariance, grace_add, memit_edit, rome_edit, AdaptedModel,
    EditMethod, EditRecord, EditRequest, GraceBook, KeyCovariance, MemitParams, RomeParams,
};
use crate::error::{Error, Result};
use crate::ids::normalize_ws;
use crate::model::{generate, GenerationMode, ToyModel, ValueOptions};
use crate::relations::RelationRegistry;
use crate::store::{KnowledgeStore, LinkDirection, Split, Triple, TripleFilter, TripleSource};
use crate::verifier::{
    render_statement, triage, Classification, classify, StatementTemplates, Threshold,
    VerifierBackend,
};

/// A model after editing: either mutated weights or an attached codebook.
#[derive(Debug, Clone)]
pub enum EditedModel {
    Parametric(ToyModel),
    Adapted(AdaptedModel),
}

impl EditedModel {
    pub fn base(&self) -> &ToyModel {
        match self {
            EditedModel::Parametric(model) => model,
            EditedModel::Adapted(adapted) => &adapted.base,
        }
    }

    pub fn greedy(&self, prompt: &str, max_new: usize) -> Result<String> {
        match self {
            EditedModel::Parametric(model) => {
                generate(model, prompt, max_new, GenerationMode::Greedy)
            }
            EditedModel::Adapted(adapted) => {
                adapted.generate(prompt, max_new, GenerationMode::Greedy)
            }
        }
    }
}

/// A parsed model generation for one head.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub triple: Triple,
}

/// Greedy-generates one (relation, tail) candidate per head.
///
/// Continuations whose first token is not a registered relation, or that
/// lack a tail, are counted as parse failures and skipped.
pub fn generate_candidates(
    model: &EditedModel,
    heads: &[String],
    template: &str,
    registry: &RelationRegistry,
    max_new: usize,
    split: Split,
) -> Result<(Vec<Triple>, usize)> {
    let mut candidates = Vec::new();
    let mut parse_failures = 0usize;
    for head in heads {
        let prompt = template.replace("{head}", head);
        let continuation = model.greedy(&prompt, max_new)?;
        let mut words = continuation.split_whitespace();
        let relation = words.next().unwrap_or("");
        let tail = words.collect::<Vec<_>>().join(" ");
        if !registry.contains(relation) || tail.is_empty() {
            parse_failures += 1;
            continue;
        }
        candidates.push(
            Triple::new(head.clone(), relation, tail, TripleSource::Generated, split)?
        );
    }
    Ok((candidates, parse_failures))
}

/// Fraction of requests whose greedy continuation equals the target after
/// whitespace normalization; 1.0 for zero requests (vacuous success).
pub fn edit_success(model: &EditedModel, requests: &[EditRequest]) -> Result<f64> {
    if requests.is_empty() {
        return Ok(1.0);
    }
    let mut matched = 0usize;
    for request in requests {
        let target = request.target_text();
        let budget = target.split_whitespace().count() + 2;
        let continuation = model.greedy(&request.prompt, budget)?;
        if normalize_ws(&continuation) == normalize_ws(&target) {
            matched += 1;
        }
    }
    Ok(matched as f64 / requests.len() as f64)
}

/// Fraction of holdout prompts whose greedy continuation is unchanged
/// between the two models; 1.0 for an empty holdout set.
pub fn locality(
    model_before: &ToyModel,
    model_after: &EditedModel,
    holdout_prompts: &[String],
    max_new: usize,
) -> Result<f64> {
    if holdout_prompts.is_empty() {
        return Ok(1.0);
    }
    let mut unchanged = 0usize;
    for prompt in holdout_prompts {
        let before = generate(model_before, prompt, max_new, GenerationMode::Greedy)?;
        let after = model_after.greedy(prompt, max_new)?;
        if before == after {
            unchanged += 1;
        }
    }
    Ok(unchanged as f64 / holdout_prompts.len() as f64)
}

/// Editor-facing knobs extracted from the pipeline config.
#[derive(Debug, Clone)]
pub struct EditorSettings {
    pub method: EditMethod,
    pub layers: Vec<usize>,
    pub covariance_ridge: f64,
    pub value: ValueOptions,
    pub init_radius: f64,
}

impl EditorSettings {
    pub fn from_config(config: &PipelineConfig, n_layers: usize) -> Result<EditorSettings> {
        Ok(EditorSettings {
            method: config.method()?,
            layers: config.layers_for(n_layers),
            covariance_ridge: config.covariance_ridge,
            value: config.value_options()?,
            init_radius: config.init_radius,
        })
    }
}

/// Owns the evolving edit state for one editing session: the (possibly
/// mutated) model, the codebook, and the covariance statistics shared by
/// the parameter methods.
pub struct EditEngine {
    settings: EditorSettings,
    model: ToyModel,
    book: GraceBook,
    covariances: Vec<KeyCovariance>,
}

impl EditEngine {
    /// Estimates per-layer covariances from `covariance_prompts` (parameter
    /// methods) and takes ownership of the model.
    pub fn new(
        model: ToyModel,
        settings: EditorSettings,
        covariance_prompts: &[String],
    ) -> Result<EditEngine> {
        let covariances = match settings.method {
            EditMethod::Grace => Vec::new(),
            _ => settings
                .layers
                .iter()
                .map(|&layer| {
                    estimate_covariance(&model, covariance_prompts, layer, settings.covariance_ridge)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(EditEngine { settings, model, book: GraceBook::new(), covariances })
    }

    /// Applies one batch of requests in ascending request-id order.
    pub fn apply_batch(&mut self, requests: &[EditRequest]) -> Result<Vec<EditRecord>> {
        let mut ordered: Vec<&EditRequest> = requests.iter().collect();
        ordered.sort_by_key(|r| r.id());
        let mut records = Vec::new();
        match self.settings.method {
            EditMethod::Rome => {
                let layer = self.settings.layers[0];
                let params = RomeParams {
                    value: self.settings.value.clone(),
                    key_prefixes: Vec::new(),
                };
                for request in ordered {
                    let outcome =
                        rome_edit(&mut self.model, request, layer, &self.covariances[0], &params)?;
                    records.push(outcome.record);
                }
            }
            EditMethod::Memit => {
                let owned: Vec<EditRequest> = ordered.into_iter().cloned().collect();
                let params = MemitParams {
                    value: self.settings.value.clone(),
                    spread: Default::default(),
                };
                let outcome = memit_edit(
                    &mut self.model,
                    &owned,
                    &self.settings.layers,
                    &self.covariances,
                    &params,
                )?;
                records.push(outcome.record);
            }
            EditMethod::Grace => {
                let layer = self.settings.layers[0];
                for request in ordered {
                    let record = grace_add(
                        &mut self.book,
                        &self.model,
                        request,
                        layer,
                        self.settings.init_radius,
                        &self.settings.value,
                    )?;
                    records.push(record);
                }
            }
        }
        Ok(records)
    }

    /// Snapshot of the edited model (adapter-wrapped for the codebook method).
    pub fn edited_model(&self) -> Result<EditedModel> {
        match self.settings.method {
            EditMethod::Grace => Ok(EditedModel::Adapted(apply_adapter(
                self.model.clone(),
                self.book.clone(),
                self.settings.layers[0],
            )?)),
            _ => Ok(EditedModel::Parametric(self.model.clone())),
        }
    }

    pub fn codebook(&self) -> &GraceBook {
        &self.book
    }
}

/// Applies request batches sequentially, re-measuring cumulative edit
/// success over all previously edited requests after each batch.
pub fn drift(
    model: &ToyModel,
    settings: EditorSettings,
    covariance_prompts: &[String],
    batches: &[Vec<EditRequest>],
) -> Result<(Vec<f64>, EditedModel)> {
    let mut engine = EditEngine::new(model.clone(), settings, covariance_prompts)?;
    let mut curve = Vec::with_capacity(batches.len());
    let mut applied: Vec<EditRequest> = Vec::new();
    for batch in batches {
        engine.apply_batch(batch)?;
        applied.extend(batch.iter().cloned());
        let edited = engine.edited_model()?;
        curve.push(edit_success(&edited, &applied)?);
    }
    let edited = engine.edited_model()?;
    Ok((curve, edited))
}

/// Everything a finished run returns: the report, the edited model, and the
/// audit records.
pub struct RunOutcome {
    pub report: RunReport,
    pub model: EditedModel,
    pub records: Vec<EditRecord>,
}

/// Paired ablation runs differing only in `conceptualization_enabled`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationReport {
    pub with_conceptualization: RunReport,
    pub without_conceptualization: RunReport,
    /// Post-edit plausible-rate difference on the held-out instantiation
    /// probe set (with − without).
    pub probe_rate_difference: f64,
}

/// The full loop against one store and one trained model.
pub struct Pipeline<'a> {
    pub config: &'a PipelineConfig,
    pub verifier: &'a dyn VerifierBackend,
    pub concept: &'a dyn ConceptBackend,
}

impl Pipeline<'_> {
    /// Runs generate → triage → (augment + propagate) → edit → re-verify.
    ///
    /// The store receives generated candidates with scores, conceptualization
    /// artifacts, and the edit records; the model is never mutated (editing
    /// works on an internal copy returned in the outcome).
    pub fn run(&self, store: &mut KnowledgeStore, model: &ToyModel) -> Result<RunOutcome> {
        let threshold = self.config.threshold_checked()?;
        let templates = StatementTemplates::default();
        let registry = store.relations().clone();
        let max_new = self.config.max_new_tokens;

        // --- stage: collect heads -------------------------------------
        let train_truths: Vec<Triple> = store
            .query(&TripleFilter {
                split: Some(Split::Train),
                source: Some(TripleSource::Dataset),
                ..Default::default()
            })
            .into_iter()
            .cloned()
            .collect();
        if train_truths.is_empty() {
            return Err(Error::input("store has no train-split dataset triples").in_stage("heads"));
        }
        let train_heads = distinct_heads(train_truths.iter());
        let test_triples: Vec<Triple> = store
            .query(&TripleFilter { split: Some(Split::Test), ..Default::default() })
            .into_iter()
            .filter(|t| t.source == TripleSource::Dataset || t.source == TripleSource::Corrected)
            .cloned()
            .collect();
        let test_heads = if test_triples.is_empty() {
            train_heads.clone()
        } else {
            distinct_heads(test_triples.iter())
        };

        let baseline = EditedModel::Parametric(model.clone());

        // --- stage: pre-edit evaluation --------------------------------
        let pre_plausible_rate = self
            .plausible_rate(&baseline, &test_heads, &templates, &registry, threshold)
            .map_err(|e| e.in_stage("pre-evaluation"))?;

        // --- stage: generate + triage on train heads -------------------
        let (candidates, parse_failures) = generate_candidates(
            &baseline,
            &train_heads,
            &self.config.generation_template,
            &registry,
            max_new,
            Split::Train,
        )
        .map_err(|e| e.in_stage("generate"))?;
        let triaged = triage(self.verifier, candidates, &templates, threshold)
            .map_err(|e| e.in_stage("triage"))?;
        for (triple, score) in triaged.plausible.iter().chain(triaged.implausible.iter()) {
            let scored = triple.clone().with_score(*score);
            let id = scored.id.clone();
            store.insert_triple(scored).map_err(|e| e.in_stage("triage"))?;
            store.set_score(&id, *score).map_err(|e| e.in_stage("triage"))?;
        }

        // --- stage: corrections + augmentation --------------------------
        let truth_by_head: BTreeMap<String, &Triple> = {
            let mut map = BTreeMap::new();
            for truth in &train_truths {
                map.entry(normalize_ws(&truth.head)).or_insert(truth);
            }
            map
        };
        let mut corrections: Vec<Triple> = Vec::new();
        for (wrong, _) in &triaged.implausible {
            if let Some(truth) = truth_by_head.get(&normalize_ws(&wrong.head)) {
                corrections.push((*truth).clone());
            }
        }
        corrections.sort_by(|a, b| a.id.cmp(&b.id));
        corrections.dedup_by(|a, b| a.id == b.id);

        let mut requests: BTreeMap<String, EditRequest> = BTreeMap::new();
        if self.config.conceptualization_enabled {
            for truth in &corrections {
                let expanded =
                    augment(self.concept, store, &truth.id, self.config.k_abs, self.config.k_inst)
                        .map_err(|e| e.in_stage("augment"))?;
                for request in expanded {
                    requests.entry(request.id()).or_insert(request);
                }
            }
            // propagate corrections to linked instances that are still stale
            let concept_ids: BTreeSet<String> = corrections
                .iter()
                .flat_map(|truth| {
                    store
                        .links()
                        .filter(|l| {
                            l.instance_id == truth.id && l.direction == LinkDirection::Abstracted
                        })
                        .map(|l| l.concept_id.clone())
                        .collect::<Vec<_>>()
                })
                .collect();
            for concept_id in &concept_ids {
                let stale = propagate(store, concept_id).map_err(|e| e.in_stage("propagate"))?;
                apply_propagation(store, &stale).map_err(|e| e.in_stage("propagate"))?;
                for request in stale {
                    requests.entry(request.id()).or_insert(request);
                }
            }
        } else {
            for truth in &corrections {
                let request =
                    edit_request_for(&truth.head, &truth.relation, &truth.tail, vec![truth.id.clone()])
                        .map_err(|e| e.in_stage("augment"))?;
                requests.entry(request.id()).or_insert(request);
            }
        }
        // tokenizability gate: requests outside the model vocabulary cannot
        // be keyed or evaluated
        let requests: Vec<EditRequest> = requests
            .into_values()
            .filter(|r| {
                model.vocab.encode(&r.prompt).is_ok() && model.vocab.encode(&r.tail).is_ok()
                    && model.vocab.encode(&r.relation).is_ok()
            })
            .collect();

        // probe set: held-out instantiations of the edited concepts, shared
        // by both ablation arms (derived via pure backend previews)
        let probes = self
            .preview_probes(&corrections, &requests, model)
            .map_err(|e| e.in_stage("probes"))?;

        // --- stage: edit -------------------------------------------------
        let settings = EditorSettings::from_config(self.config, model.config.n_layers)?;
        let covariance_prompts: Vec<String> =
            train_truths.iter().map(|t| t.head.clone()).collect();
        let mut engine = EditEngine::new(model.clone(), settings, &covariance_prompts)
            .map_err(|e| e.in_stage("edit"))?;
        let batch_size = if self.config.edit_batch_size == 0 {
            requests.len().max(1)
        } else {
            self.config.edit_batch_size
        };
        let mut drift_curve = Vec::new();
        let mut records = Vec::new();
        let mut applied: Vec<EditRequest> = Vec::new();
        for batch in requests.chunks(batch_size) {
            let batch_records = match engine.apply_batch(batch) {
                Ok(batch_records) => batch_records,
                Err(err) => {
                    // durable audit trail before aborting
                    self.append_audit(&records)?;
                    for record in records {
                        store.add_edit_record(record)?;
                    }
                    return Err(err.in_stage("edit"));
                }
            };
            records.extend(batch_records);
            applied.extend(batch.iter().cloned());
            let edited = engine.edited_model().map_err(|e| e.in_stage("edit"))?;
            drift_curve.push(edit_success(&edited, &applied).map_err(|e| e.in_stage("edit"))?);
        }
        if requests.is_empty() {
            drift_curve.push(1.0); // vacuous single batch
        }
        self.append_audit(&records)?;
        for record in &records {
            store.add_edit_record(record.clone())?;
        }
        let edited = engine.edited_model().map_err(|e| e.in_stage("edit"))?;

        // --- stage: post-edit evaluation ---------------------------------
        let edit_success_rate =
            edit_success(&edited, &requests).map_err(|e| e.in_stage("post-evaluation"))?;
        let request_prompts: BTreeSet<String> =
            requests.iter().map(|r| normalize_ws(&r.prompt)).collect();
        let holdouts: Vec<String> = test_heads
            .iter()
            .filter(|h| !request_prompts.contains(&normalize_ws(h)))
            .cloned()
            .collect();
        let locality_rate = locality(model, &edited, &holdouts, max_new)
            .map_err(|e| e.in_stage("post-evaluation"))?;
        let post_plausible_rate = self
            .plausible_rate(&edited, &test_heads, &templates, &registry, threshold)
            .map_err(|e| e.in_stage("post-evaluation"))?;
        let generalization_rate = if probes.is_empty() {
            1.0
        } else {
            self.plausible_rate(&edited, &probes, &templates, &registry, threshold)
                .map_err(|e| e.in_stage("post-evaluation"))?
        };

        let report = RunReport {
            conceptualization_enabled: self.config.conceptualization_enabled,
            edit_method: self.config.edit_method.clone(),
            seed: self.config.seed,
            pre_plausible_rate,
            post_plausible_rate,
            edit_success_rate,
            generalization_rate,
            locality_rate,
            drift_curve,
            counts: StageCounts {
                train_heads: train_heads.len(),
                candidates: train_heads.len(),
                parse_failures,
                plausible: triaged.plausible.len(),
                implausible: triaged.implausible.len(),
                corrections: corrections.len(),
                requests: requests.len(),
                edited: applied.len(),
                probes: probes.len(),
                holdouts: holdouts.len(),
                test_heads: test_heads.len(),
            },
        };
        report.validate()?;
        Ok(RunOutcome { report, model: edited, records })
    }

    /// Two runs differing only in the conceptualization flag, on fresh
    /// copies of the same store and model.
    pub fn ablate(&self, store: &KnowledgeStore, model: &ToyModel) -> Result<AblationReport> {
        let mut with_config = self.config.clone();
        with_config.conceptualization_enabled = true;
        let mut without_config = self.config.clone();
        without_config.conceptualization_enabled = false;

        let with_pipeline =
            Pipeline { config: &with_config, verifier: self.verifier, concept: self.concept };
        let mut with_store = store.clone();
        let with_outcome = with_pipeline.run(&mut with_store, model)?;

        let without_pipeline =
            Pipeline { config: &without_config, verifier: self.verifier, concept: self.concept };
        let mut without_store = store.clone();
        let without_outcome = without_pipeline.run(&mut without_store, model)?;

        let probe_rate_difference = with_outcome.report.generalization_rate
            - without_outcome.report.generalization_rate;
        Ok(AblationReport {
            with_conceptualization: with_outcome.report,
            without_conceptualization: without_outcome.report,
            probe_rate_difference,
        })
    }

    /// Plausible fraction of a model's generations for `heads`; parse
    /// failures count against the rate.
    fn plausible_rate(
        &self,
        model: &EditedModel,
        heads: &[String],
        templates: &StatementTemplates,
        registry: &RelationRegistry,
        threshold: Threshold,
    ) -> Result<f64> {
        if heads.is_empty() {
            return Err(Error::input("no heads to evaluate"));
        }
        let (candidates, _) = generate_candidates(
            model,
            heads,
            &self.config.generation_template,
            registry,
            self.config.max_new_tokens,
            Split::Test,
        )?;
        if candidates.is_empty() {
            return Ok(0.0);
        }
        let statements: Vec<String> = candidates
            .iter()
            .map(|c| render_statement(c, templates))
            .collect::<Result<_>>()?;
        let scores = self.verifier.score(&statements)?;
        let plausible = scores
            .iter()
            .filter(|s| classify(**s, threshold) == Classification::Plausible)
            .count();
        Ok(plausible as f64 / heads.len() as f64)
    }

    /// Held-out instantiations of the edited concepts: walks the same
    /// abstraction/instantiation order and budget as `augment`, then keeps
    /// the instances *beyond* the edit budget. Pure backend previews, no
    /// store writes, so both ablation arms see the identical probe set.
    fn preview_probes(
        &self,
        corrections: &[Triple],
        requests: &[EditRequest],
        model: &ToyModel,
    ) -> Result<Vec<String>> {
        let request_prompts: BTreeSet<String> =
            requests.iter().map(|r| normalize_ws(&r.prompt)).collect();
        let mut probes: Vec<String> = Vec::new();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for truth in corrections {
            let abstraction_heads = self
                .concept
                .propose_abstractions(&truth.head, &truth.relation, &truth.tail, self.config.k_abs)?
                .heads
                .into_iter()
                .filter(|h| normalize_ws(h) != normalize_ws(&truth.head))
                .take(self.config.k_abs)
                .collect::<Vec<_>>();
            let mut budget = self.config.k_inst;
            let mut collected = 0usize;
            for concept_head in &abstraction_heads {
                if collected >= self.config.probe_extra {
                    break;
                }
                let instances = self
                    .concept
                    .propose_instantiations(
                        concept_head,
                        &truth.relation,
                        &truth.tail,
                        self.config.k_inst + self.config.probe_extra,
                    )?
                    .heads;
                for head in instances {
                    let normalized = normalize_ws(&head);
                    if normalized == normalize_ws(concept_head)
                        || normalized == normalize_ws(&truth.head)
                    {
                        continue;
                    }
                    if budget > 0 {
                        budget -= 1; // consumed by the edit set
                        continue;
                    }
                    if collected >= self.config.probe_extra {
                        break;
                    }
                    if request_prompts.contains(&normalized) || !seen.insert(normalized) {
                        continue;
                    }
                    if model.vocab.encode(&head).is_err() {
                        continue;
                    }
                    probes.push(head);
                    collected += 1;
                }
            }
        }
        Ok(probes)
    }

    fn append_audit(&self, records: &[EditRecord]) -> Result<()> {
        if self.config.audit_log_path.is_empty() || records.is_empty() {
            return Ok(());
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.config.audit_log_path)
            .map_err(|e| Error::io(self.config.audit_log_path.clone(), e))?;
        for record in records {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(file, "{}", line)
                .map_err(|e| Error::io(self.config.audit_log_path.clone(), e))?;
        }
        Ok(())
    }
}

fn distinct_heads<'a>(triples: impl Iterator<Item = &'a Triple>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut heads = Vec::new();
    for triple in triples {
        if seen.insert(normalize_ws(&triple.head)) {
            heads.push(triple.head.clone());
        }
    }
    heads
}
