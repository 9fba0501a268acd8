//! Classifies wrong solutions into the 12-type taxonomy via a judge model,
//! aggregates error-type distributions per (dataset, model) scope, and
//! samples error types for augmentation.
//!
//! The distribution scope is global per (dataset, model): per-question error
//! distributions are not observable from a handful of wrong samples, so the
//! empirical frequencies are pooled across the whole corpus.

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::model::{ErrorDistribution, ErrorType, ModelError, ProblemRecord};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Judge calls use greedy decoding so classification is deterministic.
pub const JUDGE_TEMPERATURE: f64 = 0.0;
pub const JUDGE_MAX_TOKENS: u32 = 1024;

pub const CLASSIFY_PROMPT: &str = include_str!("../prompts/classify_error.txt");

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("judge response contains no recognizable error label")]
    UnparseableJudgment,
    #[error("cannot build a distribution from zero classifications")]
    EmptyInput,
    #[error("all distribution weights are zero")]
    DegenerateDistribution,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One judge verdict: the parsed error type, the judge's explanation, and
/// the raw response for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub error_type: ErrorType,
    pub explanation: String,
    pub judge_raw: String,
}

/// Parses a backtick-quoted taxonomy label ("`calculation_error'") from a
/// judge response, scanning from the last occurrence backward. Only labels
/// in the taxonomy are accepted.
pub fn parse_error_label(text: &str) -> Option<ErrorType> {
    let bytes = text.as_bytes();
    let mut candidates = Vec::new();
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'`' {
            candidates.push(i);
        }
    }
    for &start in candidates.iter().rev() {
        let rest = &text[start + 1..];
        let label: String = rest
            .chars()
            .take_while(|c| c.is_ascii_lowercase() || *c == '_')
            .collect();
        if let Ok(t) = ErrorType::from_label(&label) {
            return Some(t);
        }
    }
    None
}

fn render_classify_prompt(problem: &ProblemRecord, wrong_solution: &str) -> String {
    CLASSIFY_PROMPT
        .replace("{question}", &problem.question)
        .replace("{gt_solution}", &problem.gold_solution)
        .replace("{pred_solution}", wrong_solution)
}

/// Splits the judge's explanation from its verdict sentence. Falls back to
/// the whole response when the verdict marker is absent.
fn explanation_of(judge_raw: &str) -> String {
    match judge_raw.rfind("Therefore, the wrong type is") {
        Some(pos) if pos > 0 => judge_raw[..pos].trim().to_string(),
        _ => judge_raw.trim().to_string(),
    }
}

/// Sends a judge prompt listing the full taxonomy and parses the verdict.
/// The caller is responsible for only passing solutions whose extracted
/// answer is not equivalent to gold.
pub fn classify_error(
    gateway: &Gateway,
    judge_model: &str,
    problem: &ProblemRecord,
    wrong_solution: &str,
    seed: u64,
) -> Result<ClassificationResult, AnalyzerError> {
    let req = ChatRequest::new(judge_model, render_classify_prompt(problem, wrong_solution))
        .with_sampling(JUDGE_TEMPERATURE, 1.0)
        .with_max_tokens(JUDGE_MAX_TOKENS)
        .with_seed(seed);
    let resp = gateway.complete(&req)?;
    let error_type = parse_error_label(&resp.text).ok_or(AnalyzerError::UnparseableJudgment)?;
    Ok(ClassificationResult {
        error_type,
        explanation: explanation_of(&resp.text),
        judge_raw: resp.text,
    })
}

/// Empirical error-type frequencies over a set of classifications. Types
/// with zero count get weight zero; weights sum to one.
pub fn build_error_distribution(
    results: &[ClassificationResult],
    scope: (String, String),
) -> Result<ErrorDistribution, AnalyzerError> {
    if results.is_empty() {
        return Err(AnalyzerError::EmptyInput);
    }
    let mut counts: BTreeMap<ErrorType, usize> = BTreeMap::new();
    for r in results {
        *counts.entry(r.error_type).or_insert(0) += 1;
    }
    let total = results.len() as f64;
    let weights: BTreeMap<ErrorType, f64> = counts
        .into_iter()
        .map(|(t, c)| (t, c as f64 / total))
        .collect();
    Ok(ErrorDistribution::new(scope, weights)?)
}

/// Draws one error type from a categorical distribution. Deterministic for
/// a given RNG state; zero-weight types are never drawn.
pub fn sample_error_type<R: Rng>(
    dist: &ErrorDistribution,
    rng: &mut R,
) -> Result<ErrorType, AnalyzerError> {
    let total: f64 = dist.weights.values().sum();
    if total <= 0.0 {
        return Err(AnalyzerError::DegenerateDistribution);
    }
    let u: f64 = rng.r#gen::<f64>() * total;
    let mut cumulative = 0.0;
    let mut last_positive = None;
    for (t, w) in &dist.weights {
        if *w <= 0.0 {
            continue;
        }
        cumulative += w;
        last_positive = Some(*t);
        if u < cumulative {
            return Ok(*t);
        }
    }
    // Floating-point slack at the top of the range.
    last_positive.ok_or(AnalyzerError::DegenerateDistribution)
}
