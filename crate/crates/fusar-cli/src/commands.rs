//! Subcommand implementations. Progress goes to stderr; machine-readable
//! artifacts go to files under the output directory, each stamped with the
//! run's config hash (a meta line in JSONL artifacts, a field in JSON ones).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fusar_core::concretize::Concretizer;
use fusar_core::dataset::{emit_dataset, DatasetForge, TrainingLine};
use fusar_core::eval::{AsrTable, Evaluator, GenRecord, McqItem, McqSummary};
use fusar_core::fuzz::Fuzzifier;
use fusar_core::jsonl::{read_jsonl, write_jsonl, MetaLine};
use fusar_core::trace::Query;

use crate::config::RunConfig;

/// What a command reports back to the exit-code mapping: zero failures is a
/// clean exit, anything else is completed-with-failures.
#[derive(Debug, Clone, Copy)]
pub struct CommandOutcome {
    pub failures: usize,
}

impl CommandOutcome {
    fn clean() -> Self {
        CommandOutcome { failures: 0 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AsrArtifact {
    pub config_hash: String,
    pub table: AsrTable,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AccuracyArtifact {
    pub config_hash: String,
    pub summary: McqSummary,
}

fn prepare_out_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("cannot create out dir {}", config.out_dir.display()))
}

fn write_json_artifact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("artifact serializes");
    std::fs::write(path, format!("{json}\n"))
        .with_context(|| format!("cannot write {}", path.display()))
}

fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let queries: Vec<Query> =
        read_jsonl(path).with_context(|| format!("cannot read corpus {}", path.display()))?;
    if queries.is_empty() {
        bail!("corpus {} has no queries", path.display());
    }
    for q in &queries {
        q.validate()?;
    }
    Ok(queries)
}

/// Concretizes an origin corpus. Writes the full audit records plus a
/// queries file holding the completed rewrites for downstream commands.
pub async fn run_rewrite(config: &RunConfig, corpus: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(config)?;
    let queries = load_queries(corpus)?;
    let gateway = Arc::new(config.build_gateway()?);
    let concretizer = Concretizer::new(
        gateway,
        config.concretizer_config(),
        config.concretizer_templates()?,
    );
    let records = concretizer
        .concretize_batch(&queries, config.gateway.max_in_flight)
        .await?;

    let meta = MetaLine::new(&config.config_hash);
    write_jsonl(&config.out_dir.join("rewrite_records.jsonl"), Some(&meta), &records)?;
    let rewritten: Vec<&Query> = records.iter().filter_map(|r| r.rewritten.as_ref()).collect();
    write_jsonl(
        &config.out_dir.join("rewritten_queries.jsonl"),
        Some(&meta),
        &rewritten,
    )?;

    let failures = records.iter().filter(|r| !r.completed()).count();
    eprintln!(
        "rewrite: {} completed, {} failed (of {})",
        records.len() - failures,
        failures,
        records.len()
    );
    if failures > 0 {
        let mut by_stage = std::collections::BTreeMap::new();
        for record in &records {
            if let fusar_core::concretize::RewriteStatus::Failed { stage, .. } = &record.status {
                *by_stage.entry(stage.clone()).or_insert(0usize) += 1;
            }
        }
        for (stage, count) in by_stage {
            eprintln!("rewrite: {count} failed at stage {stage}");
        }
    }
    Ok(CommandOutcome { failures })
}

/// Generates target-model outputs for a query corpus and parses each into
/// reasoning/response phases.
pub async fn run_generate(config: &RunConfig, corpus: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(config)?;
    let queries = load_queries(corpus)?;
    let gateway = Arc::new(config.build_gateway()?);
    let evaluator = Evaluator::new(gateway);
    let records = evaluator
        .generate_outputs(&queries, &config.generation_config())
        .await?;
    let meta = MetaLine::new(&config.config_hash);
    write_jsonl(&config.out_dir.join("generated.jsonl"), Some(&meta), &records)?;
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "generate: {} ok, {} failed (of {})",
        records.len() - failures,
        failures,
        records.len()
    );
    Ok(CommandOutcome { failures })
}

/// Detoxifies the reasoning phase of generated outputs. Failed or
/// failed-validation reports are kept in the output for audit and counted
/// as failures.
pub async fn run_detox(config: &RunConfig, traces: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(config)?;
    let records: Vec<GenRecord> =
        read_jsonl(traces).with_context(|| format!("cannot read traces {}", traces.display()))?;
    if records.is_empty() {
        bail!("traces file {} has no records", traces.display());
    }
    let pairs: Vec<(String, String)> = records
        .iter()
        .map(|r| {
            let reasoning = r
                .output
                .as_ref()
                .map(|o| o.reasoning.clone())
                .unwrap_or_default();
            (r.query_id.clone(), reasoning)
        })
        .collect();

    let gateway = Arc::new(config.build_gateway()?);
    let (numeric, entity) = config.scanners()?;
    let fuzzifier = Fuzzifier::new(
        gateway,
        config.fuzzifier_config(),
        config.fuzzifier_templates()?,
        numeric,
        entity,
    );
    let reports = fuzzifier
        .fuzz_batch(&pairs, config.gateway.max_in_flight)
        .await?;
    let meta = MetaLine::new(&config.config_hash);
    write_jsonl(&config.out_dir.join("fuzz_reports.jsonl"), Some(&meta), &reports)?;

    let failures = reports.iter().filter(|r| !r.passed()).count();
    eprintln!(
        "detox: {} passed validation, {} failed (of {})",
        reports.len() - failures,
        failures,
        reports.len()
    );
    Ok(CommandOutcome { failures })
}

/// Builds alignment examples from queries plus their fuzz reports and emits
/// the dataset with manifest. With `--ablation` the targets keep an empty
/// think block and fuzz reports are ignored.
pub async fn run_build_dataset(
    config: &RunConfig,
    queries_path: &Path,
    fuzz_reports_path: &Path,
    ablation: bool,
) -> Result<CommandOutcome> {
    prepare_out_dir(config)?;
    let queries = load_queries(queries_path)?;
    let reports: Vec<fusar_core::fuzz::FuzzReport> = read_jsonl(fuzz_reports_path)
        .with_context(|| format!("cannot read fuzz reports {}", fuzz_reports_path.display()))?;

    let gateway = Arc::new(config.build_gateway()?);
    let forge = DatasetForge::new(
        gateway,
        config.forge_config(),
        config.template("reject_prefix")?,
    );
    let outcome = forge
        .assemble(&queries, &reports, ablation, config.gateway.max_in_flight)
        .await?;

    let dataset_dir = config.out_dir.join(if ablation {
        "dataset_ablation"
    } else {
        "dataset"
    });
    std::fs::create_dir_all(&dataset_dir)?;
    let manifest = emit_dataset(
        &outcome.examples,
        &outcome.exclusions,
        &dataset_dir,
        &config.splits,
        config.seed,
        &config.config_hash,
    )?;
    eprintln!(
        "build-dataset: {} examples emitted, {} deduped, {} excluded",
        manifest.split_counts.values().sum::<usize>(),
        manifest.duplicates_removed,
        manifest.excluded.len()
    );
    // Upstream fuzz failures were already accounted for by detox; only
    // reject-check failures belong to this command's exit code.
    let failures = outcome
        .exclusions
        .iter()
        .filter(|e| e.reason.starts_with("failed_reject_check"))
        .count();
    Ok(CommandOutcome { failures })
}

/// Phase-split safety evaluation over an origin/rewrite corpus pair.
pub async fn run_eval_safety(
    config: &RunConfig,
    corpus: &Path,
    rewrite_corpus: &Path,
) -> Result<CommandOutcome> {
    prepare_out_dir(config)?;
    let origins = load_queries(corpus)?;
    let rewrites = load_queries(rewrite_corpus)?;
    let gateway = Arc::new(config.build_gateway()?);
    let evaluator = Evaluator::new(gateway);
    let judge = config.judge_config()?;
    let outcome = evaluator
        .run_safety_eval(&origins, &rewrites, &config.generation_config(), &judge)
        .await?;

    let meta = MetaLine::new(&config.config_hash);
    write_jsonl(&config.out_dir.join("verdicts.jsonl"), Some(&meta), &outcome.verdicts)?;
    write_json_artifact(
        &config.out_dir.join("asr_table.json"),
        &AsrArtifact {
            config_hash: config.config_hash.clone(),
            table: outcome.table.clone(),
        },
    )?;
    eprintln!(
        "eval-safety: reasoning {}% -> {}%, response {}% -> {}% (judge: {})",
        outcome.table.reasoning_origin.pct(),
        outcome.table.reasoning_rewrite.pct(),
        outcome.table.response_origin.pct(),
        outcome.table.response_rewrite.pct(),
        judge.name
    );
    for (qid, err) in &outcome.generation_failures {
        eprintln!("eval-safety: generation failed for {qid}: {err}");
    }
    Ok(CommandOutcome {
        failures: outcome.generation_failures.len(),
    })
}

/// Multiple-choice reasoning accuracy.
pub async fn run_eval_reasoning(config: &RunConfig, mcq: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(config)?;
    let items: Vec<McqItem> =
        read_jsonl(mcq).with_context(|| format!("cannot read mcq corpus {}", mcq.display()))?;
    if items.is_empty() {
        bail!("mcq corpus {} has no items", mcq.display());
    }
    let gateway = Arc::new(config.build_gateway()?);
    let evaluator = Evaluator::new(gateway);
    let outcome = evaluator
        .run_reasoning_eval(&items, &config.generation_config(), &config.template("mcq")?)
        .await?;

    let meta = MetaLine::new(&config.config_hash);
    write_jsonl(&config.out_dir.join("mcq_results.jsonl"), Some(&meta), &outcome.results)?;
    write_json_artifact(
        &config.out_dir.join("accuracy.json"),
        &AccuracyArtifact {
            config_hash: config.config_hash.clone(),
            summary: outcome.summary.clone(),
        },
    )?;
    eprintln!(
        "eval-reasoning: accuracy {}% ({} / {}, {} abstained)",
        outcome.summary.accuracy(),
        outcome.summary.correct,
        outcome.summary.total,
        outcome.summary.abstained
    );
    let failures = outcome
        .results
        .iter()
        .filter(|r| r.extraction_note.contains("generation error"))
        .count();
    Ok(CommandOutcome { failures })
}

/// Renders CSV and Markdown reports from saved evaluation artifacts.
pub async fn run_report(
    config: &RunConfig,
    asr_paths: &[PathBuf],
    mcq_paths: &[PathBuf],
) -> Result<CommandOutcome> {
    use fusar_core::eval::{
        render_asr_csv, render_asr_markdown, render_mcq_csv, render_mcq_markdown,
    };
    if asr_paths.is_empty() && mcq_paths.is_empty() {
        bail!("report needs at least one --asr or --mcq artifact");
    }
    prepare_out_dir(config)?;

    let mut tables = Vec::new();
    for path in asr_paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let artifact: AsrArtifact = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse {}", path.display()))?;
        tables.push(artifact.table);
    }
    let mut summaries = Vec::new();
    for path in mcq_paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let artifact: AccuracyArtifact = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse {}", path.display()))?;
        summaries.push(artifact.summary);
    }

    let csv = render_asr_csv(&tables)?;
    std::fs::write(config.out_dir.join("report.csv"), &csv)?;
    let mut markdown = render_asr_markdown(&tables)?;
    if !summaries.is_empty() {
        markdown.push('\n');
        markdown.push_str(&render_mcq_markdown(&summaries));
        std::fs::write(config.out_dir.join("mcq_report.csv"), render_mcq_csv(&summaries))?;
    }
    std::fs::write(config.out_dir.join("report.md"), &markdown)?;
    write_json_artifact(
        &config.out_dir.join("report_meta.json"),
        &serde_json::json!({ "config_hash": config.config_hash }),
    )?;
    eprintln!(
        "report: wrote report.csv and report.md ({} table(s), {} accuracy summarie(s))",
        tables.len(),
        summaries.len()
    );
    Ok(CommandOutcome::clean())
}

/// Re-parses an emitted dataset file, returning its training lines; used by
/// integrity checks and tests.
pub fn read_dataset(path: &Path) -> Result<Vec<TrainingLine>> {
    Ok(read_jsonl(path)?)
}
