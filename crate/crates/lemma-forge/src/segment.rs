//! Splits raw generations into step sequences and produces the truncated
//! bad sub-trajectory that ends at the first erroneous step.
//!
//! The default mode splits on newlines first; any chunk longer than
//! `SENTENCE_FALLBACK_CHARS` is further split on sentence terminators.
//! Terminators inside latex groups (`{...}`, `$...$`, `\[...\]`) and
//! decimal points never count as boundaries, so formulas stay intact.

use crate::answer;
use crate::model::{AnnotatedBadTrajectory, ModelError, Step, Trajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chunks longer than this many characters get sentence-split in
/// line-first mode.
pub const SENTENCE_FALLBACK_CHARS: usize = 400;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("cannot segment empty text")]
    EmptyText,
    #[error("first_error_index {index} out of range for {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationMode {
    /// Split on newlines, falling back to sentence splitting for long chunks.
    LineFirst,
    /// Sentence-split the whole text regardless of line structure.
    SentenceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub mode: SegmentationMode,
    pub min_step_chars: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            mode: SegmentationMode::LineFirst,
            min_step_chars: 1,
        }
    }
}

impl SegmentationConfig {
    pub fn sentence_only() -> Self {
        SegmentationConfig {
            mode: SegmentationMode::SentenceOnly,
            min_step_chars: 1,
        }
    }
}

/// Splits a chunk on sentence terminators (`.`, `!`, `?` followed by
/// whitespace or end of text), skipping decimal points and terminators
/// inside latex groups or inline math.
fn split_sentences(chunk: &str) -> Vec<String> {
    let chars: Vec<char> = chunk.chars().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut brace_depth = 0i32;
    let mut bracket_depth = 0i32; // \[ ... \]
    let mut in_inline_math = false;

    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i];
        let prev = if i > 0 { Some(chars[i - 1]) } else { None };
        match c {
            '{' => brace_depth += 1,
            '}' => brace_depth = (brace_depth - 1).max(0),
            '$' if prev != Some('\\') => in_inline_math = !in_inline_math,
            '[' if prev == Some('\\') => bracket_depth += 1,
            ']' if prev == Some('\\') => bracket_depth = (bracket_depth - 1).max(0),
            '.' | '!' | '?' => {
                let in_latex = brace_depth > 0 || bracket_depth > 0 || in_inline_math;
                let next = chars.get(i + 1);
                let ends_sentence = next.is_none_or(|n| n.is_whitespace());
                let decimal_point = c == '.'
                    && prev.is_some_and(|p| p.is_ascii_digit())
                    && next.is_some_and(|n| n.is_ascii_digit());
                if !in_latex && ends_sentence && !decimal_point {
                    let piece: String = chars[start..=i].iter().collect();
                    out.push(piece);
                    start = i + 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    if start < chars.len() {
        let piece: String = chars[start..].iter().collect();
        out.push(piece);
    }
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Segments a raw generation into steps. The predicted answer is extracted
/// and normalized from the full text.
pub fn segment(raw_text: &str, cfg: &SegmentationConfig) -> Result<Trajectory, SegmentError> {
    if raw_text.trim().is_empty() {
        return Err(SegmentError::EmptyText);
    }

    let base_chunks: Vec<String> = match cfg.mode {
        SegmentationMode::LineFirst => raw_text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        SegmentationMode::SentenceOnly => vec![raw_text.trim().to_string()],
    };

    let mut chunks = Vec::new();
    for chunk in base_chunks {
        let needs_sentence_split = match cfg.mode {
            SegmentationMode::SentenceOnly => true,
            SegmentationMode::LineFirst => chunk.chars().count() > SENTENCE_FALLBACK_CHARS,
        };
        if needs_sentence_split {
            chunks.extend(split_sentences(&chunk));
        } else {
            chunks.push(chunk);
        }
    }

    // Chunks below the minimum length merge into the previous step (or the
    // next one when there is no previous yet).
    let mut merged: Vec<String> = Vec::new();
    let mut pending_short = String::new();
    for chunk in chunks {
        if chunk.chars().count() < cfg.min_step_chars {
            if let Some(last) = merged.last_mut() {
                last.push(' ');
                last.push_str(&chunk);
            } else {
                if !pending_short.is_empty() {
                    pending_short.push(' ');
                }
                pending_short.push_str(&chunk);
            }
        } else if pending_short.is_empty() {
            merged.push(chunk);
        } else {
            merged.push(format!("{pending_short} {chunk}"));
            pending_short.clear();
        }
    }
    if !pending_short.is_empty() {
        merged.push(pending_short);
    }

    let steps: Vec<Step> = merged
        .into_iter()
        .enumerate()
        .map(|(i, text)| Step::new(i + 1, text))
        .collect::<Result<_, _>>()?;

    let predicted_answer = answer::extract_final_answer(raw_text)
        .and_then(|raw| answer::normalize_answer(&raw).ok())
        .map(|n| n.canonical);

    Ok(Trajectory::new(steps, predicted_answer, raw_text)?)
}

/// Returns the bad sub-trajectory: the correct prefix plus the first
/// erroneous step. Output length always equals `first_error_index`.
pub fn truncate_at_first_error(t: &AnnotatedBadTrajectory) -> Result<Vec<Step>, SegmentError> {
    let len = t.trajectory.steps.len();
    if t.first_error_index < 1 || t.first_error_index > len {
        return Err(SegmentError::IndexOutOfRange {
            index: t.first_error_index,
            len,
        });
    }
    Ok(t.trajectory.steps[..t.first_error_index].to_vec())
}
