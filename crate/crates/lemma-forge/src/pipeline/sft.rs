//! SFT emission and dataset statistics.

use super::PipelineError;
use crate::forge;
use crate::model::{
    error_type_key_map, CorrectionStrategy, ErrorType, ProblemRecord, RevisionTrajectory,
    TrajectorySource,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub problem_id: String,
    pub strategy: CorrectionStrategy,
    pub error_type: ErrorType,
    pub error_source: TrajectorySource,
    pub dataset_tag: String,
}

/// One training example: the question wrapped in the fixed instruction
/// template, the revision trajectory as the target output, and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub output: String,
    pub meta: SftMeta,
}

impl SftRecord {
    pub fn from_revision(
        revision: &RevisionTrajectory,
        problem: &ProblemRecord,
    ) -> Self {
        SftRecord {
            instruction: forge::student_prompt(problem),
            output: revision.full_text.clone(),
            meta: SftMeta {
                problem_id: revision.problem_id.clone(),
                strategy: revision.strategy,
                error_type: revision.error_type,
                error_source: revision.error_source,
                dataset_tag: problem.dataset_tag.clone(),
            },
        }
    }
}

/// Converts filtered revisions to SFT records, stable-sorted by
/// (problem_id, strategy), and writes them as JSONL. Byte-deterministic for
/// identical inputs.
pub fn emit_sft(
    revisions: &[RevisionTrajectory],
    problems: &BTreeMap<String, ProblemRecord>,
    out_path: &Path,
) -> Result<usize, PipelineError> {
    let mut records = Vec::with_capacity(revisions.len());
    for revision in revisions {
        let problem = problems.get(&revision.problem_id).ok_or_else(|| {
            PipelineError::InvalidConfig(format!(
                "revision references unknown problem {:?}",
                revision.problem_id
            ))
        })?;
        records.push(SftRecord::from_revision(revision, problem));
    }
    records.sort_by(|a, b| {
        (&a.meta.problem_id, a.meta.strategy).cmp(&(&b.meta.problem_id, b.meta.strategy))
    });
    super::io::write_jsonl(out_path, &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Whitespace tokens. Differs from any model tokenizer; counts are for
    /// internal comparison only.
    Whitespace,
    /// Unicode scalar values.
    Chars,
}

fn token_count(text: &str, mode: TokenizerMode) -> usize {
    match mode {
        TokenizerMode::Whitespace => text.split_whitespace().count(),
        TokenizerMode::Chars => text.chars().count(),
    }
}

/// Dataset-level statistics over emitted records. `tokenizer_mode` records
/// how token lengths were measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_solutions: usize,
    pub avg_token_len: f64,
    #[serde(with = "error_type_key_map")]
    pub per_error_type_counts: BTreeMap<ErrorType, u64>,
    pub per_strategy_counts: BTreeMap<CorrectionStrategy, u64>,
    pub yield_rate: f64,
    pub tokenizer_mode: TokenizerMode,
}

/// Computes counts and average output length. `attempted` is the number of
/// correction attempts that fed the filter; it drives the yield rate.
pub fn compute_stats(
    records: &[SftRecord],
    attempted: usize,
    mode: TokenizerMode,
) -> DatasetStats {
    let n = records.len();
    let total_tokens: usize = records.iter().map(|r| token_count(&r.output, mode)).sum();
    let avg_token_len = if n == 0 {
        0.0
    } else {
        total_tokens as f64 / n as f64
    };
    let mut per_error_type_counts: BTreeMap<ErrorType, u64> = BTreeMap::new();
    let mut per_strategy_counts: BTreeMap<CorrectionStrategy, u64> = BTreeMap::new();
    for r in records {
        *per_error_type_counts.entry(r.meta.error_type).or_insert(0) += 1;
        *per_strategy_counts.entry(r.meta.strategy).or_insert(0) += 1;
    }
    let yield_rate = if attempted == 0 {
        0.0
    } else {
        n as f64 / attempted as f64
    };
    DatasetStats {
        n_solutions: n,
        avg_token_len,
        per_error_type_counts,
        per_strategy_counts,
        yield_rate,
        tokenizer_mode: mode,
    }
}
