//! Pins the canonical JSON shape (exact field names) of every record type
//! that crosses a file boundary. Downstream consumers parse these files;
//! a renamed or dropped field is a breaking change this test makes loud.

use lemma_forge::analyzer::ClassificationResult;
use lemma_forge::answer::normalize_answer;
use lemma_forge::forge::{CorrectionOutcome, InjectionOutcome};
use lemma_forge::gateway::{ChatRequest, ChatResponse, FinishReason};
use lemma_forge::model::{
    AnnotatedBadTrajectory, CorrectionStrategy, ErrorDistribution, ErrorType, ProblemRecord,
    ReflectionPhrase, RevisionTrajectory, Step, Trajectory, TrajectorySource, REFLECTION_PHRASES,
};
use lemma_forge::pipeline::{compute_stats, SftRecord, TokenizerMode};
use serde_json::Value;
use std::collections::BTreeMap;

fn keys_of(value: &Value) -> Vec<String> {
    value
        .as_object()
        .expect("object")
        .keys()
        .cloned()
        .collect()
}

fn assert_keys<T: serde::Serialize>(value: &T, expected: &[&str]) {
    let json = serde_json::to_value(value).unwrap();
    let mut keys = keys_of(&json);
    keys.sort();
    let mut expected: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
    expected.sort();
    assert_eq!(keys, expected);
}

fn sample_trajectory() -> Trajectory {
    Trajectory::new(
        vec![
            Step::new(1, "first step").unwrap(),
            Step::new(2, "second step. The answer is: 9").unwrap(),
        ],
        Some("9".into()),
        "first step\nsecond step. The answer is: 9",
    )
    .unwrap()
}

#[test]
fn core_record_shapes() {
    assert_keys(&Step::new(1, "x").unwrap(), &["index", "text"]);
    assert_keys(
        &sample_trajectory(),
        &["steps", "predicted_answer", "raw_text"],
    );
    assert_keys(&ErrorType::Calculation, &["code", "label"]);
    assert_keys(
        &ReflectionPhrase::new(REFLECTION_PHRASES[0]).unwrap(),
        &["text"],
    );

    let gold = normalize_answer("1").unwrap();
    let bad = AnnotatedBadTrajectory::new(
        sample_trajectory(),
        1,
        ErrorType::Calculation,
        "why",
        TrajectorySource::StudentSampled,
        &gold,
    )
    .unwrap();
    assert_keys(
        &bad,
        &["trajectory", "first_error_index", "error_type", "explanation", "source"],
    );

    let revision = RevisionTrajectory::new(
        "p1",
        vec![Step::new(1, "bad start").unwrap()],
        ReflectionPhrase::new(REFLECTION_PHRASES[1]).unwrap(),
        sample_trajectory(),
        CorrectionStrategy::FixAndContinue,
        ErrorType::Calculation,
        TrajectorySource::TeacherInjected,
        "9",
    )
    .unwrap();
    assert_keys(
        &revision,
        &[
            "problem_id",
            "bad_prefix",
            "reflection",
            "correction",
            "full_text",
            "strategy",
            "error_type",
            "error_source",
            "final_answer",
        ],
    );

    let problem = ProblemRecord::new("p1", "q?", "sol", "9", "gsm8k", None).unwrap();
    assert_keys(
        &problem,
        &["id", "question", "gold_solution", "gold_answer", "dataset_tag", "difficulty_meta"],
    );

    let dist = ErrorDistribution::new(
        ("gsm8k".into(), "m".into()),
        BTreeMap::from([(ErrorType::Calculation, 1.0)]),
    )
    .unwrap();
    assert_keys(&dist, &["scope", "weights"]);
    // Weights are keyed by the two-letter code.
    let json = serde_json::to_value(&dist).unwrap();
    assert_eq!(json["weights"]["CA"], 1.0);

    assert_keys(
        &normalize_answer("2.5").unwrap(),
        &["kind", "canonical", "rational_value"],
    );
    let rational = serde_json::to_value(normalize_answer("2.5").unwrap()).unwrap();
    assert_eq!(rational["rational_value"]["numerator"], 5);
    assert_eq!(rational["rational_value"]["denominator"], 2);
}

#[test]
fn gateway_and_synthesis_shapes() {
    assert_keys(
        &ChatRequest::new("m", "hello"),
        &["model_tag", "system", "user", "temperature", "top_p", "max_tokens", "seed_hint"],
    );
    assert_keys(
        &ChatResponse {
            text: "t".into(),
            finish_reason: FinishReason::Stop,
            request_fingerprint: "fp".into(),
        },
        &["text", "finish_reason", "request_fingerprint"],
    );

    assert_keys(
        &ClassificationResult {
            error_type: ErrorType::MissingStep,
            explanation: "e".into(),
            judge_raw: "r".into(),
        },
        &["error_type", "explanation", "judge_raw"],
    );
    assert_keys(
        &InjectionOutcome {
            erroneous_solution: "s".into(),
            explanation: "e".into(),
            requested_type: ErrorType::Operator,
        },
        &["erroneous_solution", "explanation", "requested_type"],
    );
    assert_keys(
        &CorrectionOutcome {
            revised_text: "t".into(),
            strategy: CorrectionStrategy::FreshAndRestart,
            detected_reflection: None,
            final_answer: None,
        },
        &["revised_text", "strategy", "detected_reflection", "final_answer"],
    );

    // Enum wire values.
    assert_eq!(
        serde_json::to_value(TrajectorySource::StudentSampled).unwrap(),
        "student_sampled"
    );
    assert_eq!(
        serde_json::to_value(CorrectionStrategy::FixAndContinue).unwrap(),
        "fix_and_continue"
    );
    assert_eq!(serde_json::to_value(FinishReason::Length).unwrap(), "length");
}

#[test]
fn sft_and_stats_shapes() {
    let problem = ProblemRecord::new("p1", "q?", "sol", "9", "gsm8k", None).unwrap();
    let revision = RevisionTrajectory::new(
        "p1",
        vec![Step::new(1, "bad").unwrap()],
        ReflectionPhrase::new(REFLECTION_PHRASES[2]).unwrap(),
        sample_trajectory(),
        CorrectionStrategy::FreshAndRestart,
        ErrorType::ConfusingConcept,
        TrajectorySource::StudentSampled,
        "9",
    )
    .unwrap();
    let record = SftRecord::from_revision(&revision, &problem);
    assert_keys(&record, &["instruction", "output", "meta"]);
    assert_keys(
        &record.meta,
        &["problem_id", "strategy", "error_type", "error_source", "dataset_tag"],
    );

    let stats = compute_stats(&[record], 2, TokenizerMode::Whitespace);
    assert_keys(
        &stats,
        &[
            "n_solutions",
            "avg_token_len",
            "per_error_type_counts",
            "per_strategy_counts",
            "yield_rate",
            "tokenizer_mode",
        ],
    );
    let json = serde_json::to_value(&stats).unwrap();
    assert_eq!(json["per_error_type_counts"]["CC"], 1);
    assert_eq!(json["per_strategy_counts"]["fresh_and_restart"], 1);
}
