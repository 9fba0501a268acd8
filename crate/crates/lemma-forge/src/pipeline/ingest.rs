//! Corpus ingestion: JSONL rows of {id?, question, solution, answer?, meta?}
//! become validated problem records. Rows with a missing or unparseable gold
//! answer are collected as per-row error reports, not fatal.

use super::PipelineError;
use crate::answer;
use crate::model::ProblemRecord;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Deserialize)]
struct RawRow {
    #[serde(default)]
    id: Option<String>,
    question: String,
    solution: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    meta: Option<BTreeMap<String, String>>,
}

/// A row that could not be turned into a problem record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MalformedRow {
    pub file: String,
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub problems: Vec<ProblemRecord>,
    pub rejects: Vec<MalformedRow>,
}

/// Gold answer for a row: explicit `answer` field first, then a terminal
/// "#### <answer>" marker, then the usual final-answer extraction.
fn gold_answer_of(row: &RawRow) -> Option<String> {
    if let Some(a) = &row.answer {
        let trimmed = a.trim();
        if !trimmed.is_empty() {
            return Some(trimmed.to_string());
        }
    }
    if let Some(pos) = row.solution.rfind("####") {
        let tail = row.solution[pos + 4..].trim();
        if !tail.is_empty() {
            return Some(tail.lines().next().unwrap_or("").trim().to_string());
        }
    }
    answer::extract_final_answer(&row.solution)
}

fn dataset_tag_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string()
}

/// Ingests one or more JSONL corpus files. A file with zero parseable rows
/// is an error; individually malformed rows are reported and skipped.
pub fn ingest(paths: &[std::path::PathBuf]) -> Result<IngestOutcome, PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::InvalidConfig("no input paths".into()));
    }
    let mut problems = Vec::new();
    let mut rejects = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();

    for path in paths {
        let data = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let tag = dataset_tag_of(path);
        let mut accepted = 0usize;

        for (i, line) in data.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let reject = |message: String| MalformedRow {
                file: path.display().to_string(),
                line: line_no,
                message,
            };
            let row: RawRow = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(e) => {
                    rejects.push(reject(format!("invalid JSON: {e}")));
                    continue;
                }
            };
            let Some(gold) = gold_answer_of(&row) else {
                rejects.push(reject("no gold answer present or extractable".into()));
                continue;
            };
            let id = row
                .id
                .clone()
                .unwrap_or_else(|| format!("{tag}-{line_no:06}"));
            if !seen_ids.insert(id.clone()) {
                rejects.push(reject(format!("duplicate problem id {id:?}")));
                continue;
            }
            match ProblemRecord::new(id, row.question, row.solution, gold, tag.clone(), row.meta) {
                Ok(p) => {
                    problems.push(p);
                    accepted += 1;
                }
                Err(e) => rejects.push(reject(e.to_string())),
            }
        }

        if accepted == 0 {
            return Err(PipelineError::EmptyCorpus { path: path.clone() });
        }
    }
    Ok(IngestOutcome { problems, rejects })
}
