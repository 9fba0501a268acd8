//! End-to-end orchestration: corpus ingestion, stage execution with
//! resumable checkpoints, SFT emission, and dataset statistics.
//!
//! Every stage writes its results to a checkpoint file in the output
//! directory and records completion in a manifest; a rerun resumes from the
//! first incomplete stage. With a scripted teacher and a fixed seed the
//! whole run is byte-deterministic.

pub mod ingest;
pub mod io;
pub mod sft;

pub use ingest::{ingest, IngestOutcome, MalformedRow};
pub use sft::{compute_stats, emit_sft, DatasetStats, SftMeta, SftRecord, TokenizerMode};

use crate::analyzer::{self, AnalyzerError, ClassificationResult};
use crate::forge::{self, CorrectionOutcome, StudentCollection, SynthesisParams};
use crate::gateway::{Gateway, GatewayConfig};
use crate::model::{
    AnnotatedBadTrajectory, CorrectionStrategy, ErrorDistribution, ErrorType, ProblemRecord,
    RevisionTrajectory, TrajectorySource,
};
use crate::segment::SegmentationConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("i/o failure at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("serialization failure at {path}: {message}")]
    Serde { path: PathBuf, message: String },
    #[error("corpus file {path} contains no usable rows")]
    EmptyCorpus { path: PathBuf },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("output directory belongs to a run with a different configuration")]
    ConfigMismatch,
    #[error("stage {stage} failed (resume with the same output dir from {resume_token}): {message}")]
    StageFailure {
        stage: &'static str,
        resume_token: &'static str,
        message: String,
    },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Base,
    Hard,
}

fn default_student_temperature() -> f64 {
    0.7
}
fn default_error_mix() -> f64 {
    0.5
}
fn default_n_student_samples() -> u32 {
    4
}
fn default_max_tokens() -> u32 {
    2048
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input_paths: Vec<PathBuf>,
    pub student_model: String,
    pub teacher_model: String,
    pub judge_model: String,
    #[serde(default = "default_student_temperature")]
    pub student_temperature: f64,
    pub mode: PipelineMode,
    /// Maximum solutions per question; hard mode only.
    #[serde(default)]
    pub k_max: Option<u32>,
    /// Target fraction of teacher-injected bad trajectories in base mode.
    #[serde(default = "default_error_mix")]
    pub error_mix: f64,
    pub output_dir: PathBuf,
    pub rng_seed: u64,
    pub gateway: GatewayConfig,
    /// Student samples drawn per problem.
    #[serde(default = "default_n_student_samples")]
    pub n_student_samples: u32,
    /// Token ceiling for synthesis calls.
    #[serde(default = "default_max_tokens")]
    pub synthesis_max_tokens: u32,
    /// Run against a scripted teacher fixture instead of the network.
    #[serde(default)]
    pub scripted_fixture: Option<PathBuf>,
    /// Tag twice-unparseable judgments as nonsensical-output instead of
    /// dropping them.
    #[serde(default)]
    pub tag_unparseable_as_no: bool,
    /// Stop after this stage completes (for staged or interrupted runs).
    #[serde(default)]
    pub stop_after: Option<String>,
}

impl PipelineConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self, PipelineError> {
        let data = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        toml::from_str(&data).map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.error_mix) {
            return Err(PipelineError::InvalidConfig(format!(
                "error_mix {} outside [0,1]",
                self.error_mix
            )));
        }
        if self.mode == PipelineMode::Hard && self.k_max.unwrap_or(0) < 1 {
            return Err(PipelineError::InvalidConfig(
                "hard mode requires k_max >= 1".into(),
            ));
        }
        if self.n_student_samples < 1 {
            return Err(PipelineError::InvalidConfig(
                "n_student_samples must be >= 1".into(),
            ));
        }
        if let Some(stop) = &self.stop_after {
            if Stage::parse(stop).is_none() {
                return Err(PipelineError::InvalidConfig(format!(
                    "unknown stage {stop:?} in stop_after"
                )));
            }
        }
        Ok(())
    }

    fn synthesis_params(&self) -> SynthesisParams {
        SynthesisParams {
            temperature: self.student_temperature,
            top_p: 1.0,
            max_tokens: self.synthesis_max_tokens,
        }
    }

    /// Fingerprint over the data-affecting fields; `stop_after` is a pure
    /// run-control knob and is excluded so a stopped run can be resumed by
    /// a plain rerun.
    fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.stop_after = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }
}

/// Builds the gateway for a run: scripted when a fixture is configured,
/// HTTP otherwise.
pub fn build_gateway(cfg: &PipelineConfig) -> Result<Gateway, PipelineError> {
    let mut gw_cfg = cfg.gateway.clone();
    if gw_cfg.max_tokens_ceiling < cfg.synthesis_max_tokens {
        gw_cfg.max_tokens_ceiling = cfg.synthesis_max_tokens;
    }
    match &cfg.scripted_fixture {
        Some(path) => Gateway::scripted(gw_cfg, path)
            .map_err(|e| PipelineError::InvalidConfig(format!("scripted fixture: {e}"))),
        None => Ok(Gateway::http(gw_cfg)),
    }
}

// ---------------------------------------------------------------------------
// Seeds and bounded parallelism
// ---------------------------------------------------------------------------

/// Stable FNV-1a seed stream: deterministic across platforms and runs,
/// independent of thread scheduling.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in base.to_le_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(PRIME);
    }
    for part in parts {
        for b in part.as_bytes() {
            h = (h ^ u64::from(*b)).wrapping_mul(PRIME);
        }
        h = (h ^ 0x1f).wrapping_mul(PRIME);
    }
    h
}

/// Runs `f` over items on a bounded worker pool; the output vector is
/// positionally aligned with the input.
fn run_parallel<I, T, F>(items: &[I], workers: usize, f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(usize, &I) -> T + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<T>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = workers.max(1).min(items.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut guard = next.lock().expect("index lock");
                    let i = *guard;
                    if i >= items.len() {
                        break;
                    }
                    *guard += 1;
                    i
                };
                let value = f(i, &items[i]);
                *slots[i].lock().expect("slot lock") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// Stages and manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Collect,
    Classify,
    Schedule,
    Inject,
    Locate,
    Correct,
    Filter,
    Emit,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Collect,
        Stage::Classify,
        Stage::Schedule,
        Stage::Inject,
        Stage::Locate,
        Stage::Correct,
        Stage::Filter,
        Stage::Emit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Collect => "collect",
            Stage::Classify => "classify",
            Stage::Schedule => "schedule",
            Stage::Inject => "inject",
            Stage::Locate => "locate",
            Stage::Correct => "correct",
            Stage::Filter => "filter",
            Stage::Emit => "emit",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_fingerprint: String,
    completed: Vec<String>,
}

impl Manifest {
    fn is_complete(&self, stage: Stage) -> bool {
        self.completed.iter().any(|s| s == stage.name())
    }
}

// Checkpoint row shapes. Rows wrap the canonical record types with the
// provenance ids the pipeline joins on.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentSamplesRow {
    pub problem_id: String,
    pub drawn: u32,
    pub wrong_count: u32,
    pub failures: u32,
    pub wrong_solutions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub problem_id: String,
    pub sample_index: usize,
    pub record: ClassificationResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionsFile {
    pub per_dataset: Vec<ErrorDistribution>,
    pub pooled: Option<ErrorDistribution>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub problem_id: String,
    pub failure_rate: f64,
    pub student_attempts: u32,
    pub teacher_attempts: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BadTrajectoryRow {
    pub bad_id: String,
    pub problem_id: String,
    pub source: TrajectorySource,
    pub text: String,
    /// Requested error type; present for teacher-injected rows.
    pub requested_type: Option<ErrorType>,
    /// Injection explanation; present for teacher-injected rows.
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatedRow {
    pub bad_id: String,
    pub problem_id: String,
    pub record: AnnotatedBadTrajectory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub bad_id: String,
    pub problem_id: String,
    pub record: CorrectionOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevisionRow {
    pub bad_id: String,
    pub problem_id: String,
    pub record: RevisionTrajectory,
}

/// One synthesis attempt that produced nothing, and why. Never silently
/// dropped: every stage writes its own reject file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectRow {
    pub stage: String,
    pub problem_id: String,
    pub bad_id: Option<String>,
    pub strategy: Option<CorrectionStrategy>,
    pub reason: String,
}

pub mod files {
    pub const PROBLEMS: &str = "01_problems.jsonl";
    pub const INGEST_REJECTS: &str = "01_rejects.jsonl";
    pub const STUDENT_SAMPLES: &str = "02_student_samples.jsonl";
    pub const CLASSIFICATIONS: &str = "03_classifications.jsonl";
    pub const CLASSIFY_REJECTS: &str = "03_rejects.jsonl";
    pub const DISTRIBUTIONS: &str = "03_distributions.json";
    pub const SCHEDULE: &str = "04_schedule.jsonl";
    pub const BAD_TRAJECTORIES: &str = "05_bad_trajectories.jsonl";
    pub const INJECT_REJECTS: &str = "05_rejects.jsonl";
    pub const ANNOTATED: &str = "06_annotated.jsonl";
    pub const LOCATE_REJECTS: &str = "06_rejects.jsonl";
    pub const CORRECTIONS: &str = "07_corrections.jsonl";
    pub const CORRECT_REJECTS: &str = "07_rejects.jsonl";
    pub const REVISIONS: &str = "08_revisions.jsonl";
    pub const FILTER_REJECTS: &str = "08_rejects.jsonl";
    pub const SFT: &str = "sft.jsonl";
    pub const STATS: &str = "stats.json";
    pub const MANIFEST: &str = "manifest.json";
}

struct RunContext {
    cfg: PipelineConfig,
    gateway: Gateway,
    seg_cfg: SegmentationConfig,
}

impl RunContext {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn problems(&self) -> Result<Vec<ProblemRecord>, PipelineError> {
        io::read_jsonl(&self.path(files::PROBLEMS))
    }

    fn problems_by_id(&self) -> Result<BTreeMap<String, ProblemRecord>, PipelineError> {
        Ok(self
            .problems()?
            .into_iter()
            .map(|p| (p.id.clone(), p))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Stage implementations
// ---------------------------------------------------------------------------

fn stage_ingest(ctx: &RunContext) -> Result<(), PipelineError> {
    let outcome = ingest(&ctx.cfg.input_paths)?;
    io::write_jsonl(&ctx.path(files::PROBLEMS), &outcome.problems)?;
    io::write_jsonl(&ctx.path(files::INGEST_REJECTS), &outcome.rejects)?;
    Ok(())
}

fn stage_collect(ctx: &RunContext) -> Result<(), PipelineError> {
    let problems = ctx.problems()?;
    let params = ctx.cfg.synthesis_params();
    let rows: Vec<StudentSamplesRow> = run_parallel(
        &problems,
        ctx.cfg.gateway.max_concurrency,
        |_, problem| {
            let seed_base = derive_seed(ctx.cfg.rng_seed, &[&problem.id, "student"]);
            let collection: StudentCollection = forge::collect_student_errors(
                &ctx.gateway,
                &ctx.cfg.student_model,
                problem,
                ctx.cfg.n_student_samples,
                &params,
                seed_base,
            );
            StudentSamplesRow {
                problem_id: problem.id.clone(),
                drawn: collection.drawn,
                wrong_count: collection.wrong_count,
                failures: collection.failures,
                wrong_solutions: collection.wrong_solutions,
            }
        },
    );
    io::write_jsonl(&ctx.path(files::STUDENT_SAMPLES), &rows)?;
    Ok(())
}

fn stage_classify(ctx: &RunContext) -> Result<(), PipelineError> {
    let problems = ctx.problems_by_id()?;
    let samples: Vec<StudentSamplesRow> = io::read_jsonl(&ctx.path(files::STUDENT_SAMPLES))?;

    type ClassifyOutput = (Vec<ClassificationRow>, Vec<RejectRow>);
    let per_problem: Vec<ClassifyOutput> = run_parallel(
        &samples,
        ctx.cfg.gateway.max_concurrency,
        |_, row| {
            let mut rows = Vec::new();
            let mut rejects = Vec::new();
            let Some(problem) = problems.get(&row.problem_id) else {
                return (rows, rejects);
            };
            for (j, wrong) in row.wrong_solutions.iter().enumerate() {
                let seed = derive_seed(ctx.cfg.rng_seed, &[&problem.id, "classify", &j.to_string()]);
                let mut result = analyzer::classify_error(
                    &ctx.gateway,
                    &ctx.cfg.judge_model,
                    problem,
                    wrong,
                    seed,
                );
                if matches!(result, Err(AnalyzerError::UnparseableJudgment)) {
                    let retry_seed =
                        derive_seed(ctx.cfg.rng_seed, &[&problem.id, "classify-retry", &j.to_string()]);
                    result = analyzer::classify_error(
                        &ctx.gateway,
                        &ctx.cfg.judge_model,
                        problem,
                        wrong,
                        retry_seed,
                    );
                }
                match result {
                    Ok(record) => rows.push(ClassificationRow {
                        problem_id: problem.id.clone(),
                        sample_index: j,
                        record,
                    }),
                    Err(AnalyzerError::UnparseableJudgment) if ctx.cfg.tag_unparseable_as_no => {
                        rows.push(ClassificationRow {
                            problem_id: problem.id.clone(),
                            sample_index: j,
                            record: ClassificationResult {
                                error_type: ErrorType::NonsensicalOutput,
                                explanation: "judgment unparseable after retry".into(),
                                judge_raw: String::new(),
                            },
                        });
                    }
                    Err(e) => rejects.push(RejectRow {
                        stage: "classify".into(),
                        problem_id: problem.id.clone(),
                        bad_id: None,
                        strategy: None,
                        reason: e.to_string(),
                    }),
                }
            }
            (rows, rejects)
        },
    );

    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    for (r, j) in per_problem {
        rows.extend(r);
        rejects.extend(j);
    }

    // Per-dataset empirical distributions over the student's errors, plus a
    // pooled fallback for datasets without any classified error.
    let mut by_dataset: BTreeMap<String, Vec<ClassificationResult>> = BTreeMap::new();
    for row in &rows {
        if let Some(problem) = problems.get(&row.problem_id) {
            by_dataset
                .entry(problem.dataset_tag.clone())
                .or_default()
                .push(row.record.clone());
        }
    }
    let per_dataset: Vec<ErrorDistribution> = by_dataset
        .iter()
        .filter_map(|(tag, results)| {
            analyzer::build_error_distribution(
                results,
                (tag.clone(), ctx.cfg.student_model.clone()),
            )
            .ok()
        })
        .collect();
    let all_results: Vec<ClassificationResult> = rows.iter().map(|r| r.record.clone()).collect();
    let pooled = analyzer::build_error_distribution(
        &all_results,
        ("pooled".into(), ctx.cfg.student_model.clone()),
    )
    .ok();

    io::write_jsonl(&ctx.path(files::CLASSIFICATIONS), &rows)?;
    io::write_jsonl(&ctx.path(files::CLASSIFY_REJECTS), &rejects)?;
    io::write_json(
        &ctx.path(files::DISTRIBUTIONS),
        &DistributionsFile { per_dataset, pooled },
    )?;
    Ok(())
}

fn round_ties_even_u32(x: f64) -> u32 {
    x.round_ties_even() as u32
}

fn stage_schedule(ctx: &RunContext) -> Result<(), PipelineError> {
    let samples: Vec<StudentSamplesRow> = io::read_jsonl(&ctx.path(files::STUDENT_SAMPLES))?;
    let mut rows = Vec::with_capacity(samples.len());
    for sample in &samples {
        let failure_rate = if sample.drawn == 0 {
            0.0
        } else {
            f64::from(sample.wrong_count) / f64::from(sample.drawn)
        };
        let available = sample.wrong_solutions.len() as u32;
        let (student_attempts, teacher_attempts) = match ctx.cfg.mode {
            PipelineMode::Base => {
                let teacher =
                    round_ties_even_u32(ctx.cfg.error_mix * f64::from(ctx.cfg.n_student_samples));
                let student = (ctx.cfg.n_student_samples - teacher.min(ctx.cfg.n_student_samples))
                    .min(available);
                (student, teacher)
            }
            PipelineMode::Hard => {
                let k_max = ctx.cfg.k_max.expect("validated");
                let quota = forge::compute_hard_quota(failure_rate, k_max).map_err(|e| {
                    PipelineError::InvalidConfig(format!("quota for {}: {e}", sample.problem_id))
                })?;
                (quota.student, quota.teacher)
            }
        };
        rows.push(ScheduleRow {
            problem_id: sample.problem_id.clone(),
            failure_rate,
            student_attempts,
            teacher_attempts,
        });
    }
    io::write_jsonl(&ctx.path(files::SCHEDULE), &rows)?;
    Ok(())
}

fn uniform_distribution(scope: (String, String)) -> ErrorDistribution {
    let weights: BTreeMap<ErrorType, f64> = ErrorType::ALL
        .into_iter()
        .map(|t| (t, 1.0 / 12.0))
        .collect();
    ErrorDistribution::new(scope, weights).expect("uniform distribution is valid")
}

fn stage_inject(ctx: &RunContext) -> Result<(), PipelineError> {
    let problems = ctx.problems_by_id()?;
    let samples: Vec<StudentSamplesRow> = io::read_jsonl(&ctx.path(files::STUDENT_SAMPLES))?;
    let schedule: Vec<ScheduleRow> = io::read_jsonl(&ctx.path(files::SCHEDULE))?;
    let dists: DistributionsFile = io::read_json(&ctx.path(files::DISTRIBUTIONS))?;
    let samples_by_id: BTreeMap<&str, &StudentSamplesRow> =
        samples.iter().map(|s| (s.problem_id.as_str(), s)).collect();
    let params = ctx.cfg.synthesis_params();

    type InjectOutput = (Vec<BadTrajectoryRow>, Vec<RejectRow>);
    let per_problem: Vec<InjectOutput> = run_parallel(
        &schedule,
        ctx.cfg.gateway.max_concurrency,
        |_, plan| {
            let mut bads = Vec::new();
            let mut rejects = Vec::new();
            let Some(problem) = problems.get(&plan.problem_id) else {
                return (bads, rejects);
            };

            // Student-sampled bad trajectories bind to collected wrong
            // solutions; a shortfall is an attempt that failed, not a quota
            // adjustment.
            let wrong = samples_by_id
                .get(plan.problem_id.as_str())
                .map(|s| s.wrong_solutions.as_slice())
                .unwrap_or(&[]);
            for j in 0..plan.student_attempts {
                let bad_id = format!("{}:s{j}", problem.id);
                match wrong.get(j as usize) {
                    Some(text) => bads.push(BadTrajectoryRow {
                        bad_id,
                        problem_id: problem.id.clone(),
                        source: TrajectorySource::StudentSampled,
                        text: text.clone(),
                        requested_type: None,
                        explanation: None,
                    }),
                    None => rejects.push(RejectRow {
                        stage: "inject".into(),
                        problem_id: problem.id.clone(),
                        bad_id: Some(bad_id),
                        strategy: None,
                        reason: "insufficient_student_errors".into(),
                    }),
                }
            }

            // Teacher injections draw the error type per attempt from the
            // problem's dataset distribution.
            let dist = dists
                .per_dataset
                .iter()
                .find(|d| d.scope.0 == problem.dataset_tag)
                .or(dists.pooled.as_ref())
                .cloned()
                .unwrap_or_else(|| {
                    uniform_distribution((
                        problem.dataset_tag.clone(),
                        ctx.cfg.student_model.clone(),
                    ))
                });
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(ctx.cfg.rng_seed, &[&problem.id, "etype"]));
            let inject_seed_base = derive_seed(ctx.cfg.rng_seed, &[&problem.id, "inject"]);
            for j in 0..plan.teacher_attempts {
                let bad_id = format!("{}:t{j}", problem.id);
                let etype = match analyzer::sample_error_type(&dist, &mut rng) {
                    Ok(t) => t,
                    Err(e) => {
                        rejects.push(RejectRow {
                            stage: "inject".into(),
                            problem_id: problem.id.clone(),
                            bad_id: Some(bad_id),
                            strategy: None,
                            reason: e.to_string(),
                        });
                        continue;
                    }
                };
                let seed = inject_seed_base.wrapping_add(u64::from(j));
                match forge::inject_teacher_error(
                    &ctx.gateway,
                    &ctx.cfg.teacher_model,
                    problem,
                    etype,
                    &params,
                    seed,
                ) {
                    Ok(outcome) => bads.push(BadTrajectoryRow {
                        bad_id,
                        problem_id: problem.id.clone(),
                        source: TrajectorySource::TeacherInjected,
                        text: outcome.erroneous_solution,
                        requested_type: Some(outcome.requested_type),
                        explanation: Some(outcome.explanation),
                    }),
                    Err(e) => rejects.push(RejectRow {
                        stage: "inject".into(),
                        problem_id: problem.id.clone(),
                        bad_id: Some(bad_id),
                        strategy: None,
                        reason: e.to_string(),
                    }),
                }
            }
            (bads, rejects)
        },
    );

    let mut bads = Vec::new();
    let mut rejects = Vec::new();
    for (b, r) in per_problem {
        bads.extend(b);
        rejects.extend(r);
    }
    io::write_jsonl(&ctx.path(files::BAD_TRAJECTORIES), &bads)?;
    io::write_jsonl(&ctx.path(files::INJECT_REJECTS), &rejects)?;
    Ok(())
}

fn stage_locate(ctx: &RunContext) -> Result<(), PipelineError> {
    let problems = ctx.problems_by_id()?;
    let bads: Vec<BadTrajectoryRow> = io::read_jsonl(&ctx.path(files::BAD_TRAJECTORIES))?;

    type LocateOutput = Result<AnnotatedRow, RejectRow>;
    let results: Vec<LocateOutput> = run_parallel(
        &bads,
        ctx.cfg.gateway.max_concurrency,
        |_, bad| {
            let reject = |reason: String| RejectRow {
                stage: "locate".into(),
                problem_id: bad.problem_id.clone(),
                bad_id: Some(bad.bad_id.clone()),
                strategy: None,
                reason,
            };
            let Some(problem) = problems.get(&bad.problem_id) else {
                return Err(reject("unknown problem".into()));
            };
            let seed = derive_seed(ctx.cfg.rng_seed, &[&bad.bad_id, "locate"]);
            let located = forge::locate_first_error(
                &ctx.gateway,
                &ctx.cfg.teacher_model,
                problem,
                &bad.text,
                bad.source,
                &ctx.seg_cfg,
                seed,
            )
            .map_err(|e| reject(e.to_string()))?;

            // For injected errors the requested type and the injection
            // explanation are authoritative; the locator contributes the
            // step index.
            let record = match (bad.requested_type, &bad.explanation) {
                (Some(requested), Some(explanation)) => AnnotatedBadTrajectory::new(
                    located.trajectory,
                    located.first_error_index,
                    requested,
                    explanation.clone(),
                    bad.source,
                    &problem.gold_normalized(),
                )
                .map_err(|e| reject(e.to_string()))?,
                _ => located,
            };
            Ok(AnnotatedRow {
                bad_id: bad.bad_id.clone(),
                problem_id: bad.problem_id.clone(),
                record,
            })
        },
    );

    let mut annotated = Vec::new();
    let mut rejects = Vec::new();
    for r in results {
        match r {
            Ok(row) => annotated.push(row),
            Err(row) => rejects.push(row),
        }
    }
    io::write_jsonl(&ctx.path(files::ANNOTATED), &annotated)?;
    io::write_jsonl(&ctx.path(files::LOCATE_REJECTS), &rejects)?;
    Ok(())
}

fn stage_correct(ctx: &RunContext) -> Result<(), PipelineError> {
    let problems = ctx.problems_by_id()?;
    let annotated: Vec<AnnotatedRow> = io::read_jsonl(&ctx.path(files::ANNOTATED))?;
    let params = ctx.cfg.synthesis_params();

    type CorrectOutput = (Vec<CorrectionRow>, Vec<RejectRow>);
    let per_bad: Vec<CorrectOutput> = run_parallel(
        &annotated,
        ctx.cfg.gateway.max_concurrency,
        |_, row| {
            let mut corrections = Vec::new();
            let mut rejects = Vec::new();
            let Some(problem) = problems.get(&row.problem_id) else {
                return (corrections, rejects);
            };
            // Each correction strategy runs exactly once per bad trajectory.
            let runs: [(CorrectionStrategy, &str); 2] = [
                (CorrectionStrategy::FixAndContinue, "fix"),
                (CorrectionStrategy::FreshAndRestart, "fresh"),
            ];
            for (strategy, tag) in runs {
                let seed = derive_seed(ctx.cfg.rng_seed, &[&row.bad_id, tag]);
                let result = match strategy {
                    CorrectionStrategy::FixAndContinue => forge::fix_and_continue(
                        &ctx.gateway,
                        &ctx.cfg.teacher_model,
                        problem,
                        &row.record,
                        &params,
                        seed,
                    ),
                    CorrectionStrategy::FreshAndRestart => forge::fresh_and_restart(
                        &ctx.gateway,
                        &ctx.cfg.teacher_model,
                        problem,
                        &row.record,
                        &params,
                        seed,
                    ),
                };
                match result {
                    Ok(outcome) => corrections.push(CorrectionRow {
                        bad_id: row.bad_id.clone(),
                        problem_id: row.problem_id.clone(),
                        record: outcome,
                    }),
                    Err(e) => rejects.push(RejectRow {
                        stage: "correct".into(),
                        problem_id: row.problem_id.clone(),
                        bad_id: Some(row.bad_id.clone()),
                        strategy: Some(strategy),
                        reason: e.to_string(),
                    }),
                }
            }
            (corrections, rejects)
        },
    );

    let mut corrections = Vec::new();
    let mut rejects = Vec::new();
    for (c, r) in per_bad {
        corrections.extend(c);
        rejects.extend(r);
    }
    io::write_jsonl(&ctx.path(files::CORRECTIONS), &corrections)?;
    io::write_jsonl(&ctx.path(files::CORRECT_REJECTS), &rejects)?;
    Ok(())
}

fn stage_filter(ctx: &RunContext) -> Result<(), PipelineError> {
    let problems = ctx.problems_by_id()?;
    let annotated: Vec<AnnotatedRow> = io::read_jsonl(&ctx.path(files::ANNOTATED))?;
    let corrections: Vec<CorrectionRow> = io::read_jsonl(&ctx.path(files::CORRECTIONS))?;
    let annotated_by_id: BTreeMap<&str, &AnnotatedRow> =
        annotated.iter().map(|a| (a.bad_id.as_str(), a)).collect();

    let mut revisions = Vec::new();
    let mut rejects = Vec::new();
    for correction in &corrections {
        let reject = |strategy, reason: String| RejectRow {
            stage: "filter".into(),
            problem_id: correction.problem_id.clone(),
            bad_id: Some(correction.bad_id.clone()),
            strategy: Some(strategy),
            reason,
        };
        let strategy = correction.record.strategy;
        let Some(problem) = problems.get(&correction.problem_id) else {
            rejects.push(reject(strategy, "unknown problem".into()));
            continue;
        };
        let Some(bad) = annotated_by_id.get(correction.bad_id.as_str()) else {
            rejects.push(reject(strategy, "unknown bad trajectory".into()));
            continue;
        };
        match forge::filter_and_emit(problem, &correction.record, &bad.record, &ctx.seg_cfg) {
            forge::FilterOutcome::Emitted(revision) => revisions.push(RevisionRow {
                bad_id: correction.bad_id.clone(),
                problem_id: correction.problem_id.clone(),
                record: *revision,
            }),
            forge::FilterOutcome::Rejected(reason) => {
                rejects.push(reject(strategy, format!("{reason:?}")));
            }
        }
    }
    io::write_jsonl(&ctx.path(files::REVISIONS), &revisions)?;
    io::write_jsonl(&ctx.path(files::FILTER_REJECTS), &rejects)?;
    Ok(())
}

fn stage_emit(ctx: &RunContext) -> Result<(), PipelineError> {
    let problems = ctx.problems_by_id()?;
    let annotated: Vec<AnnotatedRow> = io::read_jsonl(&ctx.path(files::ANNOTATED))?;
    let revisions: Vec<RevisionRow> = io::read_jsonl(&ctx.path(files::REVISIONS))?;
    let records: Vec<RevisionTrajectory> = revisions.into_iter().map(|r| r.record).collect();

    emit_sft(&records, &problems, &ctx.path(files::SFT))?;

    let sft_records: Vec<SftRecord> = io::read_jsonl(&ctx.path(files::SFT))?;
    // Both strategies are attempted once per annotated bad trajectory.
    let attempted = annotated.len() * 2;
    let stats = compute_stats(&sft_records, attempted, TokenizerMode::Whitespace);
    io::write_json(&ctx.path(files::STATS), &stats)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

fn load_or_create_manifest(ctx: &RunContext) -> Result<Manifest, PipelineError> {
    let path = ctx.path(files::MANIFEST);
    if path.exists() {
        let manifest: Manifest = io::read_json(&path)?;
        if manifest.config_fingerprint != ctx.cfg.fingerprint() {
            return Err(PipelineError::ConfigMismatch);
        }
        Ok(manifest)
    } else {
        Ok(Manifest {
            config_fingerprint: ctx.cfg.fingerprint(),
            completed: Vec::new(),
        })
    }
}

/// Executes the pipeline stage by stage, resuming from the last completed
/// stage when rerun over the same output directory. Returns the final
/// statistics, or `None` when stopped early via `stop_after`.
pub fn run(cfg: PipelineConfig) -> Result<Option<DatasetStats>, PipelineError> {
    cfg.validate()?;
    let gateway = build_gateway(&cfg)?;
    let stop_after = cfg.stop_after.as_deref().and_then(Stage::parse);
    let ctx = RunContext {
        cfg,
        gateway,
        seg_cfg: SegmentationConfig::default(),
    };
    std::fs::create_dir_all(&ctx.cfg.output_dir).map_err(|e| PipelineError::Io {
        path: ctx.cfg.output_dir.clone(),
        message: e.to_string(),
    })?;
    let mut manifest = load_or_create_manifest(&ctx)?;

    for stage in Stage::ALL {
        if !manifest.is_complete(stage) {
            let result = match stage {
                Stage::Ingest => stage_ingest(&ctx),
                Stage::Collect => stage_collect(&ctx),
                Stage::Classify => stage_classify(&ctx),
                Stage::Schedule => stage_schedule(&ctx),
                Stage::Inject => stage_inject(&ctx),
                Stage::Locate => stage_locate(&ctx),
                Stage::Correct => stage_correct(&ctx),
                Stage::Filter => stage_filter(&ctx),
                Stage::Emit => stage_emit(&ctx),
            };
            result.map_err(|e| PipelineError::StageFailure {
                stage: stage.name(),
                resume_token: stage.name(),
                message: e.to_string(),
            })?;
            manifest.completed.push(stage.name().to_string());
            io::write_json(&ctx.path(files::MANIFEST), &manifest)?;
        }
        if stop_after == Some(stage) {
            return Ok(None);
        }
    }

    let stats: DatasetStats = io::read_json(&ctx.path(files::STATS))?;
    Ok(Some(stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_derivation_is_stable_and_sensitive() {
        let a = derive_seed(17, &["p1", "student"]);
        let b = derive_seed(17, &["p1", "student"]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(18, &["p1", "student"]));
        assert_ne!(a, derive_seed(17, &["p1", "inject"]));
        assert_ne!(a, derive_seed(17, &["p2", "student"]));
        // Part boundaries matter: ("ab", "c") != ("a", "bc").
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
    }

    #[test]
    fn run_parallel_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = run_parallel(&items, 7, |i, item| {
            assert_eq!(i, *item);
            item * 3
        });
        assert_eq!(out, (0..100).map(|i| i * 3).collect::<Vec<_>>());
    }

    #[test]
    fn stage_names_roundtrip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::parse(stage.name()), Some(stage));
        }
        assert_eq!(Stage::parse("nonsense"), None);
    }

    #[test]
    fn base_schedule_splits_by_error_mix() {
        // With n_student_samples=4 and mix=0.5: 2 teacher attempts, student
        // attempts capped by available wrong solutions.
        let teacher = round_ties_even_u32(0.5 * 4.0);
        assert_eq!(teacher, 2);
    }
}
