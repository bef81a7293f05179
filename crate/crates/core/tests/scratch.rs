//! Temporary tuning harness (deleted before release).

use std::time::Instant;

use conke_core::pipeline::fixtures::{DeskFixture, FixtureSpec};
use conke_core::pipeline::Pipeline;

#[test]
#[ignore = "tuning harness"]
fn tune_efficacy() {
    let start = Instant::now();
    let fixture = DeskFixture::build(FixtureSpec::efficacy(7)).unwrap();
    eprintln!("corpus: {} sentences", fixture.corpus.len());
    let (model, report) = fixture.train().unwrap();
    eprintln!(
        "train: {:.1}s, final_loss {:.4}, memorization {:.3}",
        start.elapsed().as_secs_f64(),
        report.final_loss,
        report.memorization_accuracy
    );
    let verifier = fixture.verifier();
    let concept = fixture.concept_backend().unwrap();
    let pipeline = Pipeline { config: &fixture.config, verifier: &verifier, concept: &concept };
    let mut store = fixture.store.clone();
    let run_start = Instant::now();
    let outcome = pipeline.run(&mut store, &model).unwrap();
    eprintln!("run: {:.1}s", run_start.elapsed().as_secs_f64());
    eprintln!("{}", outcome.report.to_table());
    eprintln!("total: {:.1}s", start.elapsed().as_secs_f64());
}

#[test]
#[ignore = "tuning harness"]
fn tune_value_optimization() {
    use conke_core::conceptualizer::{edit_request_for, full_span};
    use conke_core::editors::{estimate_covariance, memit_edit, EditRequest, MemitParams};
    use conke_core::model::{generate, optimize_value, GenerationMode, GradientMethod, ValueOptions};
    use conke_core::store::{Split, TripleFilter, TripleSource};

    let fixture = DeskFixture::build(FixtureSpec::efficacy(7)).unwrap();
    let (model, _) = fixture.train().unwrap();
    let truths: Vec<_> = fixture
        .store
        .query(&TripleFilter {
            split: Some(Split::Train),
            source: Some(TripleSource::Dataset),
            ..Default::default()
        })
        .into_iter()
        .cloned()
        .collect();
    let truth = &truths[0];
    let target = format!("{} {}", truth.relation, truth.tail);
    eprintln!("head: '{}' target: '{}'", truth.head, target);
    eprintln!(
        "pre-edit greedy: '{}'",
        generate(&model, &truth.head, 6, GenerationMode::Greedy).unwrap()
    );
    let edit_prompt = format!("{} {}", truth.head, truth.relation);
    for (steps, step_size) in [(25, 0.5), (25, 2.0), (50, 1.0), (100, 1.0), (50, 5.0)] {
        let fit = optimize_value(
            &model,
            &edit_prompt,
            full_span(&edit_prompt),
            &truth.tail,
            0,
            &ValueOptions { steps, step_size, gradient: GradientMethod::Analytic },
        )
        .unwrap();
        eprintln!(
            "steps {steps} step_size {step_size}: init {:.4} final {:.4} |v| {:.3}",
            fit.initial_loss,
            fit.final_loss,
            fit.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }
    // single-request memit at high value budget, then check generation
    let mut edited = model.clone();
    let cov_prompts: Vec<String> = truths.iter().map(|t| t.head.clone()).collect();
    let cov = estimate_covariance(&edited, &cov_prompts, 0, 1e-2).unwrap();
    let request =
        edit_request_for(&truth.head, &truth.relation, &truth.tail, vec![]).unwrap();
    let outcome = memit_edit(
        &mut edited,
        &[request],
        &[0],
        &[cov],
        &MemitParams {
            value: ValueOptions { steps: 100, step_size: 1.0, gradient: GradientMethod::Analytic },
            spread: Default::default(),
        },
    )
    .unwrap();
    eprintln!(
        "memit single: pre {:.4} post {:.4} greedy_match {}",
        outcome.record.pre_score, outcome.record.post_score, outcome.greedy_match_fraction
    );
    eprintln!(
        "post-edit greedy: '{}'",
        generate(&edited, &truth.head, 6, GenerationMode::Greedy).unwrap()
    );
}

#[test]
#[ignore = "tuning harness"]
fn tune_ablation() {
    for seed in 1..=5u64 {
        let start = Instant::now();
        let fixture = DeskFixture::build(FixtureSpec::ablation(seed)).unwrap();
        let (model, report) = fixture.train().unwrap();
        let verifier = fixture.verifier();
        let concept = fixture.concept_backend().unwrap();
        let pipeline =
            Pipeline { config: &fixture.config, verifier: &verifier, concept: &concept };
        let ablation = pipeline.ablate(&fixture.store, &model).unwrap();
        eprintln!(
            "seed {}: mem {:.3} | with: gen {:.3} post {:.3} succ {:.3} | without: gen {:.3} post {:.3} | diff {:.3} | {:.1}s",
            seed,
            report.memorization_accuracy,
            ablation.with_conceptualization.generalization_rate,
            ablation.with_conceptualization.post_plausible_rate,
            ablation.with_conceptualization.edit_success_rate,
            ablation.without_conceptualization.generalization_rate,
            ablation.without_conceptualization.post_plausible_rate,
            ablation.probe_rate_difference,
            start.elapsed().as_secs_f64()
        );
    }
}
