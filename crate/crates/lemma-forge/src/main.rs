//! Command-line entry point: `run` executes the synthesis pipeline from a
//! config file; `analyze` classifies wrong solutions; `score` evaluates
//! predictions; `stats` summarizes an emitted dataset.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lemma_forge::analyzer;
use lemma_forge::answer;
use lemma_forge::gateway::{Gateway, GatewayConfig};
use lemma_forge::model::ProblemRecord;
use lemma_forge::pipeline::{self, PipelineConfig, SftRecord, TokenizerMode};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lemma-forge", version, about = "Error-corrective revision trajectory synthesis for math SFT data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Pass1,
    Maj,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tokenizer {
    Whitespace,
    Chars,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full synthesis pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this stage completes.
        #[arg(long)]
        stop_after: Option<String>,
        /// Bypass the response cache (fresh sampling).
        #[arg(long)]
        no_cache: bool,
    },
    /// Classify wrong solutions and summarize the error distribution.
    Analyze {
        /// JSONL of {problem, wrong_solution}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Tag of the model that produced the wrong solutions.
        #[arg(long)]
        model_tag: String,
        #[arg(long)]
        judge_model: String,
        /// Gateway TOML config (endpoint, retries, cache).
        #[arg(long)]
        gateway_config: Option<PathBuf>,
        /// Scripted teacher fixture; runs offline.
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
    /// Score a JSONL file of {id, samples, gold}.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Samples per item for majority voting (0 = all).
        #[arg(long, default_value_t = 0)]
        k: usize,
    },
    /// Print dataset statistics for an emitted SFT file.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "whitespace")]
        tokenizer: Tokenizer,
    },
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<Vec<T>> {
    let data = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(item);
    }
    Ok(out)
}

fn cmd_run(config: PathBuf, stop_after: Option<String>, no_cache: bool) -> Result<()> {
    let mut cfg = PipelineConfig::from_toml_path(&config)
        .with_context(|| format!("loading config {}", config.display()))?;
    if stop_after.is_some() {
        cfg.stop_after = stop_after;
    }
    if no_cache {
        cfg.gateway.no_cache = true;
    }
    match pipeline::run(cfg)? {
        Some(stats) => println!("{}", serde_json::to_string_pretty(&stats)?),
        None => println!("stopped early; rerun without --stop-after to finish"),
    }
    Ok(())
}

#[derive(Deserialize)]
struct AnalyzeRow {
    problem: ProblemRecord,
    wrong_solution: String,
}

fn cmd_analyze(
    input: PathBuf,
    output_dir: PathBuf,
    model_tag: String,
    judge_model: String,
    gateway_config: Option<PathBuf>,
    scripted: Option<PathBuf>,
) -> Result<()> {
    let rows: Vec<AnalyzeRow> = read_jsonl(&input)?;
    if rows.is_empty() {
        bail!("{} contains no rows", input.display());
    }
    let gw_cfg: GatewayConfig = match gateway_config {
        Some(path) => {
            let data = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&data).context("parsing gateway config")?
        }
        None => GatewayConfig {
            cache_dir: output_dir.join(".lemma-cache"),
            ..GatewayConfig::default()
        },
    };
    let gateway = match &scripted {
        Some(fixture) => Gateway::scripted(gw_cfg, fixture)?,
        None => Gateway::http(gw_cfg),
    };

    std::fs::create_dir_all(&output_dir)?;
    let mut results = Vec::new();
    let mut failures = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let seed = pipeline::derive_seed(0, &[&row.problem.id, "analyze", &i.to_string()]);
        match analyzer::classify_error(&gateway, &judge_model, &row.problem, &row.wrong_solution, seed)
        {
            Ok(result) => results.push((row.problem.dataset_tag.clone(), result)),
            Err(e) => {
                eprintln!("row {}: {e}", i + 1);
                failures += 1;
            }
        }
    }
    if results.is_empty() {
        bail!("no row classified successfully ({failures} failures)");
    }

    let classifications_path = output_dir.join("classifications.jsonl");
    let body: String = results
        .iter()
        .map(|(_, r)| serde_json::to_string(r).expect("result serializes"))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&classifications_path, format!("{body}\n"))?;

    let mut by_dataset: std::collections::BTreeMap<String, Vec<analyzer::ClassificationResult>> =
        std::collections::BTreeMap::new();
    for (tag, result) in &results {
        by_dataset.entry(tag.clone()).or_default().push(result.clone());
    }
    let distributions: Vec<_> = by_dataset
        .iter()
        .filter_map(|(tag, rs)| {
            analyzer::build_error_distribution(rs, (tag.clone(), model_tag.clone())).ok()
        })
        .collect();
    let summary_path = output_dir.join("distribution_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&distributions)?)?;

    println!(
        "{}",
        serde_json::json!({
            "classified": results.len(),
            "failures": failures,
            "classifications": classifications_path,
            "distribution_summary": summary_path,
        })
    );
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRow {
    #[allow(dead_code)]
    #[serde(default)]
    id: Option<String>,
    samples: Vec<String>,
    gold: String,
}

#[derive(Serialize)]
struct ScoreReport {
    metric: String,
    value: f64,
    n_items: usize,
}

fn cmd_score(input: PathBuf, metric: Metric, k: usize) -> Result<()> {
    let rows: Vec<ScoreRow> = read_jsonl(&input)?;
    if rows.is_empty() {
        bail!("{} contains no rows", input.display());
    }
    let golds: Vec<&str> = rows.iter().map(|r| r.gold.as_str()).collect();
    let report = match metric {
        Metric::Pass1 => {
            let predictions: Vec<&str> = rows
                .iter()
                .map(|r| r.samples.first().map(String::as_str).unwrap_or(""))
                .collect();
            ScoreReport {
                metric: "pass1".into(),
                value: answer::score_pass_at_1(&predictions, &golds)?,
                n_items: rows.len(),
            }
        }
        Metric::Maj => {
            let samples: Vec<Vec<&str>> = rows
                .iter()
                .map(|r| {
                    let take = if k == 0 { r.samples.len() } else { k.min(r.samples.len()) };
                    r.samples[..take].iter().map(String::as_str).collect()
                })
                .collect();
            ScoreReport {
                metric: if k == 0 { "maj".into() } else { format!("maj@{k}") },
                value: answer::score_majority_at_k(&samples, &golds)?,
                n_items: rows.len(),
            }
        }
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_stats(input: PathBuf, tokenizer: Tokenizer) -> Result<()> {
    let records: Vec<SftRecord> = read_jsonl(&input)?;
    let mode = match tokenizer {
        Tokenizer::Whitespace => TokenizerMode::Whitespace,
        Tokenizer::Chars => TokenizerMode::Chars,
    };
    let stats = pipeline::compute_stats(&records, records.len(), mode);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            stop_after,
            no_cache,
        } => cmd_run(config, stop_after, no_cache),
        Command::Analyze {
            input,
            output_dir,
            model_tag,
            judge_model,
            gateway_config,
            scripted,
        } => cmd_analyze(input, output_dir, model_tag, judge_model, gateway_config, scripted),
        Command::Score { input, metric, k } => cmd_score(input, metric, k),
        Command::Stats { input, tokenizer } => cmd_stats(input, tokenizer),
    }
}
