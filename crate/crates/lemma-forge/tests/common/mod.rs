// Shared across several integration-test targets; not every target uses
// every helper.
#![allow(dead_code)]
#![allow(clippy::manual_is_multiple_of)]

//! Shared test support: builds a synthetic problem corpus plus a scripted
//! teacher fixture covering every call the pipeline makes, with failure
//! patterns injected at fixed ordinals so the expected yield is known
//! analytically before the pipeline runs.
//!
//! Patterns (by problem ordinal `i`):
//! - i % 5 == 0  -> the student answers all samples correctly (no student bads)
//! - i % 7 == 3  -> fix-and-continue responses carry no catalog phrase
//! - i % 11 == 4 -> fresh-and-restart responses end with a wrong answer
//! - i % 13 == 6 -> one teacher injection is accidentally correct
//! - i % 17 == 8 -> the locator quote for one student bad matches nothing
//! - i % 19 == 7 -> one judge classification is unparseable

use lemma_forge::gateway::{GatewayConfig, ScriptEntry};
use lemma_forge::model::REFLECTION_PHRASES;
use lemma_forge::pipeline::{PipelineConfig, PipelineMode};
use std::path::{Path, PathBuf};

pub const N_STUDENT_SAMPLES: u32 = 4;

pub struct ProblemParams {
    pub i: usize,
    pub id: String,
    pub a: u64,
    pub b: u64,
    pub gold: u64,
}

pub fn problem_params(i: usize) -> ProblemParams {
    let a = i as u64 + 2;
    let b = i as u64 + 3;
    ProblemParams {
        i,
        id: format!("fx{i:02}"),
        a,
        b,
        gold: a + b,
    }
}

pub fn question_of(p: &ProblemParams) -> String {
    format!(
        "Q{:02}: Ada starts with {} apples and buys {} more. How many apples does she have in the end?",
        p.i, p.a, p.b
    )
}

pub fn gold_solution_of(p: &ProblemParams) -> String {
    format!(
        "Ada starts with {} apples.\nShe buys {} more, so she has {} + {} = {} apples.\nThe answer is: {}",
        p.a, p.b, p.a, p.b, p.gold, p.gold
    )
}

/// A wrong (or deliberately correct) three-line attempt carrying a unique
/// marker in its second step.
fn attempt_text(p: &ProblemParams, marker: &str, final_answer: u64) -> String {
    format!(
        "Ada starts with {} apples.\nShe buys {} more, so she has {} + {} = {} apples. ({marker} {})\nThe answer is: {}",
        p.a, p.b, p.a, p.b, final_answer, p.id, final_answer
    )
}

fn correct_student_text(p: &ProblemParams) -> String {
    format!(
        "Ada starts with {} apples.\nShe buys {} more, so she has {} + {} = {} apples.\nThe answer is: {}",
        p.a, p.b, p.a, p.b, p.gold, p.gold
    )
}

fn second_step_of(text: &str) -> &str {
    text.lines().nth(1).expect("attempt has three lines")
}

fn entry(match_substring: String, response_text: String) -> ScriptEntry {
    ScriptEntry {
        match_substring,
        response_text,
    }
}

const W1_LABELS: [&str; 4] = [
    "question_misinterpretation_error",
    "confusing_concept_error",
    "missing_step_error",
    "operator_error",
];

fn phrase_for(i: usize, bad_ordinal: usize, strategy_ordinal: usize) -> &'static str {
    REFLECTION_PHRASES[(i * 4 + bad_ordinal * 2 + strategy_ordinal) % 13]
}

/// Entries for one bad-trajectory candidate: classify (student only),
/// locate, fix-and-continue, fresh-and-restart.
#[allow(clippy::too_many_arguments)]
fn push_bad_entries(
    entries: &mut Vec<ScriptEntry>,
    p: &ProblemParams,
    marker: &str,
    bad_ordinal: usize,
    text: &str,
    final_answer: u64,
    is_student: bool,
    classify_label: &str,
) {
    let i = p.i;
    let tail_key = format!("({marker} {})\nThe answer is: {}", p.id, final_answer);
    let step2 = second_step_of(text).to_string();

    if is_student {
        let classify_response = if marker == "w1" && i % 19 == 7 {
            "This is wrong but I cannot put a clean category on it.".to_string()
        } else {
            format!(
                "The solution is incorrect, the first wrong step arises because the sum in the \
                 second step is off by a constant. Therefore, the wrong type is `{classify_label}'."
            )
        };
        entries.push(entry(
            format!("{tail_key}\n\n[Classification Explanation]"),
            classify_response,
        ));
    }

    let locate_response = if is_student && marker == "w1" && i % 17 == 8 {
        "First erroneous step: \"a step that simply is not present anywhere in this attempt\"\n\
         Hard to pin down. Therefore, the wrong type is `calculation_error'."
            .to_string()
    } else {
        format!(
            "First erroneous step: \"{step2}\"\nThe sum in this step is computed incorrectly. \
             Therefore, the wrong type is `{classify_label}'."
        )
    };
    entries.push(entry(format!("{tail_key}\n\n[Analysis]"), locate_response));

    let prefix_echo = text.lines().take(2).collect::<Vec<_>>().join("\n");
    let ff_response = if i % 7 == 3 {
        format!(
            "{prefix_echo}\nDirectly then: {} + {} = {} apples. The answer is: {}",
            p.a, p.b, p.gold, p.gold
        )
    } else {
        format!(
            "{prefix_echo}\n{} Correcting the arithmetic properly: {} + {} = {} apples. The answer is: {}",
            phrase_for(i, bad_ordinal, 0),
            p.a,
            p.b,
            p.gold,
            p.gold
        )
    };
    entries.push(entry(format!("{tail_key}\n\n[Ground-truth Solution]"), ff_response));

    let fr_response = if i % 11 == 4 {
        format!(
            "{prefix_echo}\n{} Let me recount from scratch: {} plus {} comes to {}. The answer is: {}",
            phrase_for(i, bad_ordinal, 1),
            p.a,
            p.b,
            p.gold + 9,
            p.gold + 9
        )
    } else {
        format!(
            "{prefix_echo}\n{} Let me recount from scratch: {} plus {} comes to {}. The answer is: {}",
            phrase_for(i, bad_ordinal, 1),
            p.a,
            p.b,
            p.gold,
            p.gold
        )
    };
    entries.push(entry(format!("{tail_key}\n\n[Corrected Solution]"), fr_response));
}

/// Builds the corpus JSONL and the scripted teacher JSONL for `n` problems.
pub fn build_fixture(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut corpus_lines = Vec::new();
    let mut entries: Vec<ScriptEntry> = Vec::new();

    for i in 0..n {
        let p = problem_params(i);
        let question = question_of(&p);
        let gold_solution = gold_solution_of(&p);
        corpus_lines.push(
            serde_json::json!({
                "id": p.id,
                "question": question,
                "solution": gold_solution,
                "answer": p.gold.to_string(),
            })
            .to_string(),
        );

        // Student sampling: four entries rotated by seed.
        let student_key = format!("### Instruction: Q{i:02}:");
        if i % 5 == 0 {
            for _ in 0..4 {
                entries.push(entry(student_key.clone(), correct_student_text(&p)));
            }
        } else {
            let w0 = attempt_text(&p, "w0", p.gold + 1);
            let w1 = attempt_text(&p, "w1", p.gold + 2);
            entries.push(entry(student_key.clone(), w0.clone()));
            entries.push(entry(student_key.clone(), w1.clone()));
            entries.push(entry(student_key.clone(), w0.clone()));
            entries.push(entry(student_key, correct_student_text(&p)));

            push_bad_entries(&mut entries, &p, "w0", 0, &w0, p.gold + 1, true, "calculation_error");
            push_bad_entries(&mut entries, &p, "w1", 1, &w1, p.gold + 2, true, W1_LABELS[i % 4]);
        }

        // Teacher injections: two entries rotated by seed; one may be
        // accidentally correct.
        let inject_key = format!("The answer is: {}\n\n[Error-Injected Solution]", p.gold);
        let t0 = attempt_text(&p, "t0", p.gold + 3);
        entries.push(entry(
            inject_key.clone(),
            format!("{t0}\n<explanation>The second step slips the sum by three on purpose.</explanation>"),
        ));
        let t1_answer = if i % 13 == 6 { p.gold } else { p.gold + 4 };
        let t1 = attempt_text(&p, "t1", t1_answer);
        entries.push(entry(
            inject_key,
            format!("{t1}\n<explanation>The second step slips the sum by four on purpose.</explanation>"),
        ));
        push_bad_entries(&mut entries, &p, "t0", 2, &t0, p.gold + 3, false, "calculation_error");
        if i % 13 != 6 {
            push_bad_entries(&mut entries, &p, "t1", 3, &t1, p.gold + 4, false, "calculation_error");
        }
    }

    let corpus_path = dir.join("corpus.jsonl");
    std::fs::write(&corpus_path, corpus_lines.join("\n")).expect("write corpus");
    let fixture_path = dir.join("teacher_fixture.jsonl");
    let body: Vec<String> = entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("entry serializes"))
        .collect();
    std::fs::write(&fixture_path, body.join("\n")).expect("write fixture");
    (corpus_path, fixture_path)
}

/// Hand-trace oracle: expected emitted records for problem `i`, derived
/// from the fixture's failure patterns alone.
pub fn expected_emit_for(i: usize) -> usize {
    let student_located = if i % 5 == 0 {
        0
    } else if i % 17 == 8 {
        1
    } else {
        2
    };
    let teacher_bads = if i % 13 == 6 { 1 } else { 2 };
    let located = student_located + teacher_bads;
    let mut per_bad = 2;
    if i % 7 == 3 {
        per_bad -= 1;
    }
    if i % 11 == 4 {
        per_bad -= 1;
    }
    located * per_bad
}

pub fn expected_emit_total(n: usize) -> usize {
    (0..n).map(expected_emit_for).sum()
}

pub fn base_config(
    corpus: &Path,
    fixture: &Path,
    out_dir: &Path,
    cache_dir: &Path,
) -> PipelineConfig {
    PipelineConfig {
        input_paths: vec![corpus.to_path_buf()],
        student_model: "student-8b".into(),
        teacher_model: "teacher-xl".into(),
        judge_model: "judge-xl".into(),
        student_temperature: 0.7,
        mode: PipelineMode::Base,
        k_max: None,
        error_mix: 0.5,
        output_dir: out_dir.to_path_buf(),
        rng_seed: 17,
        gateway: GatewayConfig {
            cache_dir: cache_dir.to_path_buf(),
            max_concurrency: 4,
            max_retries: 1,
            backoff_base_ms: 1,
            ..GatewayConfig::default()
        },
        n_student_samples: N_STUDENT_SAMPLES,
        synthesis_max_tokens: 2048,
        scripted_fixture: Some(fixture.to_path_buf()),
        tag_unparseable_as_no: false,
        stop_after: None,
    }
}

/// Builds a hard-mode corpus where problem `i` fails exactly `wrong_of(i)`
/// of `n_samples` student draws, so the per-problem failure rate is known
/// exactly. Teacher injections always succeed.
pub fn build_hard_fixture(
    dir: &Path,
    n_problems: usize,
    n_samples: u32,
    wrong_of: impl Fn(usize) -> u32,
) -> (PathBuf, PathBuf) {
    let mut corpus_lines = Vec::new();
    let mut entries: Vec<ScriptEntry> = Vec::new();

    for i in 0..n_problems {
        let gold = 100 + i as u64;
        let id = format!("hq{i:02}");
        let question = format!("HQ{i:02}: what is the constant for case {i}?");
        let gold_solution = format!("The constant is fixed.\nThe answer is: {gold}");
        corpus_lines.push(
            serde_json::json!({
                "id": id,
                "question": question,
                "solution": gold_solution,
                "answer": gold.to_string(),
            })
            .to_string(),
        );

        let student_key = format!("### Instruction: HQ{i:02}:");
        let wrong = wrong_of(i).min(n_samples);
        for j in 0..n_samples {
            let text = if j < wrong {
                format!(
                    "Looking at case {i}, attempt {j} computes it differently. (hw{j} {id})\nThe answer is: {}",
                    gold + 1 + u64::from(j)
                )
            } else {
                format!("The constant is fixed.\nThe answer is: {gold}")
            };
            entries.push(entry(student_key.clone(), text));
        }

        let inject_key = format!("The answer is: {gold}\n\n[Error-Injected Solution]");
        for v in 0..2u64 {
            entries.push(entry(
                inject_key.clone(),
                format!(
                    "A deliberately flawed take on case {i}. (ht{v} {id})\nThe answer is: {}\n<explanation>The constant was shifted on purpose.</explanation>",
                    gold + 50 + v
                ),
            ));
        }
    }

    let corpus_path = dir.join("hard_corpus.jsonl");
    std::fs::write(&corpus_path, corpus_lines.join("\n")).expect("write corpus");
    let fixture_path = dir.join("hard_fixture.jsonl");
    let body: Vec<String> = entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("entry serializes"))
        .collect();
    std::fs::write(&fixture_path, body.join("\n")).expect("write fixture");
    (corpus_path, fixture_path)
}

pub fn hard_config(
    corpus: &Path,
    fixture: &Path,
    out_dir: &Path,
    cache_dir: &Path,
    n_samples: u32,
    k_max: u32,
) -> PipelineConfig {
    let mut cfg = base_config(corpus, fixture, out_dir, cache_dir);
    cfg.mode = PipelineMode::Hard;
    cfg.k_max = Some(k_max);
    cfg.n_student_samples = n_samples;
    cfg
}

/// Output files that must be byte-identical across deterministic runs.
pub const DATA_FILES: [&str; 17] = [
    "01_problems.jsonl",
    "01_rejects.jsonl",
    "02_student_samples.jsonl",
    "03_classifications.jsonl",
    "03_rejects.jsonl",
    "03_distributions.json",
    "04_schedule.jsonl",
    "05_bad_trajectories.jsonl",
    "05_rejects.jsonl",
    "06_annotated.jsonl",
    "06_rejects.jsonl",
    "07_corrections.jsonl",
    "07_rejects.jsonl",
    "08_revisions.jsonl",
    "08_rejects.jsonl",
    "sft.jsonl",
    "stats.json",
];
