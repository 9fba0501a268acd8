//! The synthesis core: collects student errors, injects teacher errors by
//! sampled type, locates and truncates first errors, runs both correction
//! strategies with the fixed prompt templates, assembles revision
//! trajectories, and filters them by answer correctness.

use crate::analyzer;
use crate::answer::{self, NormalizedAnswer};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::model::{
    assemble_text, AnnotatedBadTrajectory, CorrectionStrategy, ErrorType, ModelError,
    ProblemRecord, ReflectionPhrase, RevisionTrajectory, Step, Trajectory, TrajectorySource,
};
use crate::segment::{self, SegmentationConfig, SegmentError};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

pub const INTRODUCE_ERROR_PROMPT: &str = include_str!("../prompts/introduce_error.txt");
pub const FIX_AND_CONTINUE_PROMPT: &str = include_str!("../prompts/fix_and_continue.txt");
pub const FRESH_AND_RESTART_PROMPT: &str = include_str!("../prompts/fresh_and_restart.txt");
pub const LOCATE_FIRST_ERROR_PROMPT: &str = include_str!("../prompts/locate_first_error.txt");
/// Instruction wrapper used both for student sampling and SFT emission.
pub const INSTRUCTION_WRAPPER: &str = include_str!("../prompts/sft_instruction.txt");

/// Sampling parameters for synthesis calls (student sampling, injection,
/// corrections). Locator calls run greedy like the judge.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthesisParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: 2048,
        }
    }
}

/// Minimum token-containment of the bad prefix in the teacher's revised
/// head for the head to be trusted verbatim.
pub const PREFIX_LINT_THRESHOLD: f64 = 0.7;
/// Minimum token overlap for the third-tier quote match in
/// [`locate_first_error`].
pub const LOCATOR_OVERLAP_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("teacher response is missing <explanation> tags")]
    MissingExplanationTags,
    #[error("injected solution ends with the gold answer")]
    AccidentallyCorrect,
    #[error("locator quote matches no step (best overlap {best:.2})")]
    LocatorMismatch { best: f64 },
    #[error("could not parse the teacher judgment")]
    UnparseableJudgment,
    #[error("bad prefix must be non-empty")]
    EmptyPrefix,
    #[error("failure rate {0} outside [0,1] or k_max < 1")]
    DomainError(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Student error collection
// ---------------------------------------------------------------------------

/// Wrong solutions drawn from the student plus the raw draw accounting used
/// for failure-rate estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentCollection {
    pub wrong_solutions: Vec<String>,
    /// Samples that completed successfully.
    pub drawn: u32,
    /// Wrong samples before deduplication.
    pub wrong_count: u32,
    /// Samples lost to gateway failures.
    pub failures: u32,
}

impl StudentCollection {
    /// Empirical failure rate: wrong samples over samples drawn.
    pub fn failure_rate(&self) -> f64 {
        if self.drawn == 0 {
            0.0
        } else {
            f64::from(self.wrong_count) / f64::from(self.drawn)
        }
    }
}

pub fn student_prompt(problem: &ProblemRecord) -> String {
    INSTRUCTION_WRAPPER.replace("{instruction}", &problem.question)
}

fn dedup_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Samples `n_samples` student completions, keeps only those whose extracted
/// answer is not equivalent to gold, and deduplicates by normalized text.
/// Per-sample gateway failures are skipped and counted, not fatal.
pub fn collect_student_errors(
    gateway: &Gateway,
    student_model: &str,
    problem: &ProblemRecord,
    n_samples: u32,
    params: &SynthesisParams,
    seed_base: u64,
) -> StudentCollection {
    let prompt = student_prompt(problem);
    let reqs: Vec<ChatRequest> = (0..n_samples)
        .map(|j| {
            ChatRequest::new(student_model, prompt.clone())
                .with_sampling(params.temperature, params.top_p)
                .with_max_tokens(params.max_tokens)
                .with_seed(seed_base.wrapping_add(u64::from(j)))
        })
        .collect();
    let responses = gateway.complete_batch(&reqs);

    let gold = problem.gold_normalized();
    let mut collection = StudentCollection {
        wrong_solutions: Vec::new(),
        drawn: 0,
        wrong_count: 0,
        failures: 0,
    };
    let mut seen: HashSet<String> = HashSet::new();
    for resp in responses {
        if resp.finish_reason == crate::gateway::FinishReason::Error {
            collection.failures += 1;
            continue;
        }
        collection.drawn += 1;
        let text = resp.text.trim().to_string();
        if text.is_empty() {
            continue;
        }
        let is_correct = answer::extract_final_answer(&text)
            .and_then(|raw| answer::normalize_answer(&raw).ok())
            .is_some_and(|pred| answer::answers_equivalent(&pred, &gold));
        if is_correct {
            continue;
        }
        collection.wrong_count += 1;
        if seen.insert(dedup_key(&text)) {
            collection.wrong_solutions.push(text);
        }
    }
    collection
}

// ---------------------------------------------------------------------------
// Teacher error injection
// ---------------------------------------------------------------------------

/// A teacher-injected erroneous solution and its explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionOutcome {
    pub erroneous_solution: String,
    pub explanation: String,
    pub requested_type: ErrorType,
}

pub fn injection_prompt(problem: &ProblemRecord, etype: ErrorType) -> String {
    // The template reads "{Error_Description}." so the description loses its
    // trailing period to avoid doubling it.
    let description = etype.description().trim_end_matches('.');
    INTRODUCE_ERROR_PROMPT
        .replace("{Error_Type}", etype.display_name())
        .replace("{Error_Description}", description)
        .replace("{error_type}", etype.prose_name())
        .replace("{question}", &problem.question)
        .replace("{gt_solution}", &problem.gold_solution)
}

/// Asks the teacher to produce a plausibly wrong solution of the requested
/// error type. Outcomes whose final answer equals gold are rejected.
pub fn inject_teacher_error(
    gateway: &Gateway,
    teacher_model: &str,
    problem: &ProblemRecord,
    etype: ErrorType,
    params: &SynthesisParams,
    seed: u64,
) -> Result<InjectionOutcome, ForgeError> {
    let req = ChatRequest::new(teacher_model, injection_prompt(problem, etype))
        .with_sampling(params.temperature, params.top_p)
        .with_max_tokens(params.max_tokens)
        .with_seed(seed);
    let resp = gateway.complete(&req)?;

    let open = resp
        .text
        .find("<explanation>")
        .ok_or(ForgeError::MissingExplanationTags)?;
    let after_open = open + "<explanation>".len();
    let close_rel = resp.text[after_open..]
        .find("</explanation>")
        .ok_or(ForgeError::MissingExplanationTags)?;
    let erroneous_solution = resp.text[..open].trim().to_string();
    let explanation = resp.text[after_open..after_open + close_rel].trim().to_string();
    if erroneous_solution.is_empty() {
        return Err(ForgeError::MissingExplanationTags);
    }

    let gold = problem.gold_normalized();
    let accidentally_correct = answer::extract_final_answer(&erroneous_solution)
        .and_then(|raw| answer::normalize_answer(&raw).ok())
        .is_some_and(|pred| answer::answers_equivalent(&pred, &gold));
    if accidentally_correct {
        return Err(ForgeError::AccidentallyCorrect);
    }

    Ok(InjectionOutcome {
        erroneous_solution,
        explanation,
        requested_type: etype,
    })
}

// ---------------------------------------------------------------------------
// First-error location
// ---------------------------------------------------------------------------

fn collapse_ws_punct(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace() && !c.is_ascii_punctuation())
        .collect()
}

fn token_set(s: &str) -> HashSet<&str> {
    s.split_whitespace().collect()
}

fn jaccard(a: &HashSet<&str>, b: &HashSet<&str>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Finds the quoted step among the trajectory's steps: exact byte match
/// first, then whitespace/punctuation-collapsed match, then the
/// highest-Jaccard token match at or above the overlap threshold.
fn match_quote_to_step(steps: &[Step], quote: &str) -> Result<usize, ForgeError> {
    if let Some(i) = steps.iter().position(|s| s.text == quote) {
        return Ok(i + 1);
    }
    let collapsed = collapse_ws_punct(quote);
    if !collapsed.is_empty() {
        if let Some(i) = steps.iter().position(|s| collapse_ws_punct(&s.text) == collapsed) {
            return Ok(i + 1);
        }
    }
    let quote_tokens = token_set(quote);
    let mut best = 0.0f64;
    let mut best_index = None;
    for (i, step) in steps.iter().enumerate() {
        let overlap = jaccard(&quote_tokens, &token_set(&step.text));
        if overlap > best {
            best = overlap;
            best_index = Some(i + 1);
        }
    }
    match best_index {
        Some(i) if best >= LOCATOR_OVERLAP_THRESHOLD => Ok(i),
        _ => Err(ForgeError::LocatorMismatch { best }),
    }
}

fn parse_quote_line(text: &str) -> Option<String> {
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("First erroneous step:") {
            let rest = rest.trim();
            let first = rest.find('"')?;
            let last = rest.rfind('"')?;
            if last > first {
                return Some(rest[first + 1..last].to_string());
            }
        }
    }
    None
}

pub fn locator_prompt(problem: &ProblemRecord, wrong_solution: &str) -> String {
    LOCATE_FIRST_ERROR_PROMPT
        .replace("{question}", &problem.question)
        .replace("{gt_solution}", &problem.gold_solution)
        .replace("{pred_solution}", wrong_solution)
}

/// Asks the teacher to quote the first erroneous step verbatim and name its
/// error type, then locates the quote among the segmented steps.
pub fn locate_first_error(
    gateway: &Gateway,
    teacher_model: &str,
    problem: &ProblemRecord,
    wrong_solution: &str,
    source: TrajectorySource,
    seg_cfg: &SegmentationConfig,
    seed: u64,
) -> Result<AnnotatedBadTrajectory, ForgeError> {
    let trajectory = segment::segment(wrong_solution, seg_cfg)?;
    let req = ChatRequest::new(teacher_model, locator_prompt(problem, wrong_solution))
        .with_sampling(analyzer::JUDGE_TEMPERATURE, 1.0)
        .with_max_tokens(analyzer::JUDGE_MAX_TOKENS)
        .with_seed(seed);
    let resp = gateway.complete(&req)?;

    let quote = parse_quote_line(&resp.text).ok_or(ForgeError::UnparseableJudgment)?;
    let error_type =
        analyzer::parse_error_label(&resp.text).ok_or(ForgeError::UnparseableJudgment)?;
    let first_error_index = match_quote_to_step(&trajectory.steps, &quote)?;

    let gold = problem.gold_normalized();
    Ok(AnnotatedBadTrajectory::new(
        trajectory,
        first_error_index,
        error_type,
        resp.text.trim(),
        source,
        &gold,
    )?)
}

// ---------------------------------------------------------------------------
// Correction strategies
// ---------------------------------------------------------------------------

/// A raw correction response before filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub revised_text: String,
    pub strategy: CorrectionStrategy,
    pub detected_reflection: Option<ReflectionPhrase>,
    pub final_answer: Option<NormalizedAnswer>,
}

pub fn correction_prompt(
    strategy: CorrectionStrategy,
    problem: &ProblemRecord,
    previous_attempt: &str,
) -> String {
    match strategy {
        CorrectionStrategy::FixAndContinue => FIX_AND_CONTINUE_PROMPT
            .replace("{question}", &problem.question)
            .replace("{pred_solution}", previous_attempt)
            .replace("{gt_solution}", &problem.gold_solution),
        // The restart prompt omits the ground-truth solution slot.
        CorrectionStrategy::FreshAndRestart => FRESH_AND_RESTART_PROMPT
            .replace("{question}", &problem.question)
            .replace("{pred_solution}", previous_attempt),
    }
}

fn run_correction(
    gateway: &Gateway,
    teacher_model: &str,
    problem: &ProblemRecord,
    bad: &AnnotatedBadTrajectory,
    strategy: CorrectionStrategy,
    params: &SynthesisParams,
    seed: u64,
) -> Result<CorrectionOutcome, ForgeError> {
    let prompt = correction_prompt(strategy, problem, &bad.trajectory.raw_text);
    let req = ChatRequest::new(teacher_model, prompt)
        .with_sampling(params.temperature, params.top_p)
        .with_max_tokens(params.max_tokens)
        .with_seed(seed);
    let resp = gateway.complete(&req)?;
    let revised_text = resp.text.trim().to_string();

    let detected_reflection =
        ReflectionPhrase::find_first_in(&revised_text).map(|(phrase, _)| phrase);
    let final_answer = answer::extract_final_answer(&revised_text)
        .and_then(|raw| answer::normalize_answer(&raw).ok());
    Ok(CorrectionOutcome {
        revised_text,
        strategy,
        detected_reflection,
        final_answer,
    })
}

/// Fixes the first error step in place and continues reasoning to the gold
/// answer. The prompt carries the full previous attempt and the gold
/// solution.
pub fn fix_and_continue(
    gateway: &Gateway,
    teacher_model: &str,
    problem: &ProblemRecord,
    bad: &AnnotatedBadTrajectory,
    params: &SynthesisParams,
    seed: u64,
) -> Result<CorrectionOutcome, ForgeError> {
    run_correction(
        gateway,
        teacher_model,
        problem,
        bad,
        CorrectionStrategy::FixAndContinue,
        params,
        seed,
    )
}

/// Critiques the flawed attempt and solves the problem anew, possibly by
/// another method. No gold solution is shown to the teacher.
pub fn fresh_and_restart(
    gateway: &Gateway,
    teacher_model: &str,
    problem: &ProblemRecord,
    bad: &AnnotatedBadTrajectory,
    params: &SynthesisParams,
    seed: u64,
) -> Result<CorrectionOutcome, ForgeError> {
    run_correction(
        gateway,
        teacher_model,
        problem,
        bad,
        CorrectionStrategy::FreshAndRestart,
        params,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Assembly and filtering
// ---------------------------------------------------------------------------

/// Deterministic concatenation of the truncated bad prefix, a reflection
/// phrase, and the correct continuation.
pub fn assemble_revision(
    prefix: &[Step],
    reflection: &ReflectionPhrase,
    good: &Trajectory,
) -> Result<String, ForgeError> {
    if prefix.is_empty() {
        return Err(ForgeError::EmptyPrefix);
    }
    Ok(assemble_text(prefix, reflection, good))
}

/// Why a correction outcome was not emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoFinalAnswer,
    WrongFinalAnswer,
    NoReflectionDetected,
    EmptyCorrection,
    StructuralDrift,
}

#[derive(Debug)]
pub enum FilterOutcome {
    Emitted(Box<RevisionTrajectory>),
    Rejected(RejectReason),
}

impl FilterOutcome {
    pub fn into_option(self) -> Option<RevisionTrajectory> {
        match self {
            FilterOutcome::Emitted(r) => Some(*r),
            FilterOutcome::Rejected(_) => None,
        }
    }
}

/// Token containment of the bad prefix in the teacher's revised head.
fn prefix_containment(prefix: &[Step], head: &str) -> f64 {
    let prefix_text: String = prefix
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let prefix_tokens = token_set(&prefix_text);
    if prefix_tokens.is_empty() {
        return 0.0;
    }
    let head_tokens = token_set(head);
    let contained = prefix_tokens.intersection(&head_tokens).count() as f64;
    contained / prefix_tokens.len() as f64
}

/// Emits a revision trajectory iff the correction's final answer is present
/// and equivalent to gold and a catalog reflection phrase was detected.
///
/// The teacher's revised text is trusted as far as structure allows: the
/// text after the detected phrase becomes the correction verbatim, and the
/// head before it replaces the mechanical prefix when it passes the
/// containment lint and re-segments to exactly `first_error_index` steps.
/// Otherwise the truncated sub-trajectory is assembled mechanically.
pub fn filter_and_emit(
    problem: &ProblemRecord,
    outcome: &CorrectionOutcome,
    bad: &AnnotatedBadTrajectory,
    seg_cfg: &SegmentationConfig,
) -> FilterOutcome {
    let Some(final_answer) = &outcome.final_answer else {
        return FilterOutcome::Rejected(RejectReason::NoFinalAnswer);
    };
    let gold = problem.gold_normalized();
    if !answer::answers_equivalent(final_answer, &gold) {
        return FilterOutcome::Rejected(RejectReason::WrongFinalAnswer);
    }
    if outcome.detected_reflection.is_none() {
        return FilterOutcome::Rejected(RejectReason::NoReflectionDetected);
    }
    // Re-detect rather than trusting the stored phrase: the split offset and
    // the stored phrase must come from the same scan of the same text.
    let Some((reflection, phrase_pos)) = ReflectionPhrase::find_first_in(&outcome.revised_text)
    else {
        return FilterOutcome::Rejected(RejectReason::NoReflectionDetected);
    };
    let reflection = &reflection;
    let head = outcome.revised_text[..phrase_pos].trim();
    let tail = outcome.revised_text[phrase_pos + reflection.text().len()..].trim();
    if tail.is_empty() {
        return FilterOutcome::Rejected(RejectReason::EmptyCorrection);
    }
    let Ok(correction) = segment::segment(tail, seg_cfg) else {
        return FilterOutcome::Rejected(RejectReason::EmptyCorrection);
    };

    let Ok(mechanical_prefix) = segment::truncate_at_first_error(bad) else {
        return FilterOutcome::Rejected(RejectReason::StructuralDrift);
    };
    let prefix = if !head.is_empty()
        && prefix_containment(&mechanical_prefix, head) >= PREFIX_LINT_THRESHOLD
    {
        match segment::segment(head, seg_cfg) {
            Ok(head_traj) if head_traj.steps.len() == mechanical_prefix.len() => head_traj.steps,
            _ => mechanical_prefix,
        }
    } else {
        mechanical_prefix
    };

    let Ok(full_text) = assemble_revision(&prefix, reflection, &correction) else {
        return FilterOutcome::Rejected(RejectReason::StructuralDrift);
    };
    // Re-verify the assembled text end to end; no model involved.
    let reparsed_ok = answer::extract_final_answer(&full_text)
        .and_then(|raw| answer::normalize_answer(&raw).ok())
        .is_some_and(|a| answer::answers_equivalent(&a, &gold));
    if !reparsed_ok {
        return FilterOutcome::Rejected(RejectReason::StructuralDrift);
    }

    match RevisionTrajectory::new(
        problem.id.clone(),
        prefix,
        reflection.clone(),
        correction,
        outcome.strategy,
        bad.error_type,
        bad.source,
        final_answer.canonical.clone(),
    ) {
        Ok(revision) => {
            debug_assert_eq!(revision.full_text, full_text);
            FilterOutcome::Emitted(Box::new(revision))
        }
        Err(_) => FilterOutcome::Rejected(RejectReason::StructuralDrift),
    }
}

// ---------------------------------------------------------------------------
// Hard-mode quota
// ---------------------------------------------------------------------------

/// Per-problem synthesis quota for hard mode: `total = round(f * k_max)`
/// with ties to even, split half student / half teacher (odd leftover goes
/// to the teacher).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardQuota {
    pub total: u32,
    pub student: u32,
    pub teacher: u32,
}

pub fn compute_hard_quota(failure_rate: f64, k_max: u32) -> Result<HardQuota, ForgeError> {
    if !failure_rate.is_finite() || !(0.0..=1.0).contains(&failure_rate) {
        return Err(ForgeError::DomainError(failure_rate));
    }
    if k_max < 1 {
        return Err(ForgeError::DomainError(failure_rate));
    }
    let total = (failure_rate * f64::from(k_max)).round_ties_even() as u32;
    let student = total / 2;
    let teacher = total - student;
    Ok(HardQuota {
        total,
        student,
        teacher,
    })
}
