//! Alignment-example assembly and fine-tune-ready JSONL emission.
//!
//! A training example pairs a detoxified reasoning trace with a safe
//! refusal-with-explanation ("think first, then reject"). The refusal comes
//! from an instructed model prompted with a safety prefix and must pass a
//! refusal-presence check (marker plus length floor) — a bare "no" carries no
//! explanation. The ablation variant keeps only the refusal under an empty
//! think block. Emission dedupes exact-duplicate user texts, splits with a
//! seeded shuffle, and writes a manifest that reconciles every count.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzz::FuzzReport;
use crate::gateway::{ChatExchange, ChatMessage, Gateway, GatewayError, PurposeTag};
use crate::jsonl::{self, JsonlError};
use crate::template::Template;
use crate::trace::{
    render_ablation_target, render_training_target, split_output, ParseStatus, Query, TraceError,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{what} must be non-empty")]
    Precondition { what: &'static str },
    #[error("query `{id}`: reject failed the refusal-presence check after retry: {reason}")]
    RejectCheckFailed { id: String, reason: String },
    #[error("query `{id}` has no fuzz report")]
    MissingFuzzReport { id: String },
    #[error("query `{id}`: fuzz report did not pass and ablation is off")]
    FailedFuzzReport { id: String },
    #[error("query `{id}`: detoxified reasoning is blank")]
    EmptyDetox { id: String },
    #[error("duplicate example id `{id}`")]
    DuplicateId { id: String },
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("training line does not parse back: {message}")]
    LineParse { message: String },
    #[error(transparent)]
    Render(#[from] TraceError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("manifest i/o at {path}: {message}")]
    ManifestIo { path: PathBuf, message: String },
}

pub const DEFAULT_REJECT_MARKERS: &[&str] = &[
    "i can't",
    "i cannot",
    "i can not",
    "i won't",
    "i will not",
    "i'm sorry",
    "i am sorry",
    "i'm not able",
    "i am not able",
    "unable to help",
    "unable to assist",
    "must decline",
    "instead",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuzz_report_id: Option<String>,
    pub reject_model: String,
    pub prompt_template_ids: Vec<String>,
    pub pipeline_version: String,
}

/// One "think first, then reject" training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentExample {
    pub query: Query,
    /// Detoxified reasoning; empty exactly in the ablation variant.
    pub detox_reasoning: String,
    pub reject: String,
    pub rendered_target: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub split_counts: BTreeMap<String, usize>,
    /// Examples handed to emission (after upstream exclusions).
    pub input_examples: usize,
    /// Exact-duplicate user texts dropped (first occurrence kept).
    pub duplicates_removed: usize,
    /// Records excluded upstream, with reasons.
    pub excluded: Vec<Exclusion>,
}

impl DatasetManifest {
    /// Split counts must sum to the inputs minus dedupe removals.
    pub fn reconciles(&self) -> bool {
        let emitted: usize = self.split_counts.values().sum();
        emitted + self.duplicates_removed == self.input_examples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub fraction: f64,
}

impl SplitSpec {
    pub fn single() -> Vec<SplitSpec> {
        vec![SplitSpec {
            name: "train".to_string(),
            fraction: 1.0,
        }]
    }
}

#[derive(Debug, Clone)]
pub struct ForgeConfig {
    pub reject_model: String,
    pub max_tokens: u32,
    /// Case-insensitive markers, any of which satisfies the presence check.
    pub reject_markers: Vec<String>,
    /// The reject must exceed this many words.
    pub min_reject_words: usize,
}

impl ForgeConfig {
    pub fn new(reject_model: impl Into<String>) -> Self {
        ForgeConfig {
            reject_model: reject_model.into(),
            max_tokens: 1024,
            reject_markers: DEFAULT_REJECT_MARKERS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            min_reject_words: 20,
        }
    }

    /// Checks that a reject contains a refusal marker (or explicit
    /// safe-alternative framing) and carries an explanation-sized body.
    pub fn reject_check(&self, reject: &str) -> Result<(), String> {
        let lower = reject.to_lowercase();
        if !self
            .reject_markers
            .iter()
            .any(|m| !m.is_empty() && lower.contains(&m.to_lowercase()))
        {
            return Err("no refusal marker present".to_string());
        }
        let words = reject.split_whitespace().count();
        if words <= self.min_reject_words {
            return Err(format!(
                "only {words} words, need more than {}",
                self.min_reject_words
            ));
        }
        Ok(())
    }
}

pub struct DatasetForge {
    gateway: Arc<Gateway>,
    config: ForgeConfig,
    /// System prompt prepended to every reject generation.
    safety_prefix: Template,
}

/// Assembled examples plus everything that was excluded, with reasons.
#[derive(Debug, Clone)]
pub struct ForgeOutcome {
    pub examples: Vec<AlignmentExample>,
    pub exclusions: Vec<Exclusion>,
}

impl DatasetForge {
    pub fn new(gateway: Arc<Gateway>, config: ForgeConfig, safety_prefix: Template) -> Self {
        DatasetForge {
            gateway,
            config,
            safety_prefix,
        }
    }

    /// Asks the instructed model for a safe refusal to `query`, with the
    /// safety prefix as system prompt. One corrective retry on a failed
    /// refusal-presence check, then the query is excluded.
    pub async fn gen_reject(&self, query: &Query) -> Result<String, DatasetError> {
        if query.text.trim().is_empty() {
            return Err(DatasetError::Precondition { what: "query text" });
        }
        let system = ChatMessage::system(self.safety_prefix.text().trim());
        let user = ChatMessage::user(query.text.clone());
        let exchange = ChatExchange::new(
            PurposeTag::Reject,
            &self.config.reject_model,
            vec![system.clone(), user.clone()],
        )?
        .with_max_tokens(self.config.max_tokens)?;
        let first = self.gateway.complete(&exchange).await?;
        let reason = match self.config.reject_check(&first) {
            Ok(()) => return Ok(first),
            Err(reason) => reason,
        };
        let retry = ChatExchange::new(
            PurposeTag::Reject,
            &self.config.reject_model,
            vec![
                system,
                user,
                ChatMessage::assistant(first),
                ChatMessage::user(
                    "That reply is not acceptable: it must clearly decline, explain why \
                     in a few sentences, and point to a safer alternative.",
                ),
            ],
        )?
        .with_max_tokens(self.config.max_tokens)?;
        let second = self.gateway.complete(&retry).await?;
        match self.config.reject_check(&second) {
            Ok(()) => Ok(second),
            Err(second_reason) => Err(DatasetError::RejectCheckFailed {
                id: query.id.clone(),
                reason: format!("{reason}; retry: {second_reason}"),
            }),
        }
    }

    /// Assembles one example. Without the ablation flag the fuzz report must
    /// have passed validation; with it the report is ignored entirely and
    /// the target keeps an empty think block.
    pub fn build_example(
        &self,
        query: &Query,
        fuzz: Option<&FuzzReport>,
        reject: &str,
        ablation: bool,
    ) -> Result<AlignmentExample, DatasetError> {
        query.validate()?;
        self.config
            .reject_check(reject)
            .map_err(|reason| DatasetError::RejectCheckFailed {
                id: query.id.clone(),
                reason,
            })?;
        let (detox_reasoning, rendered_target, fuzz_report_id) = if ablation {
            (String::new(), render_ablation_target(reject), None)
        } else {
            let report = fuzz.ok_or_else(|| DatasetError::MissingFuzzReport {
                id: query.id.clone(),
            })?;
            if !report.passed() {
                return Err(DatasetError::FailedFuzzReport {
                    id: query.id.clone(),
                });
            }
            if report.detoxified.trim().is_empty() {
                return Err(DatasetError::EmptyDetox {
                    id: query.id.clone(),
                });
            }
            let rendered = render_training_target(&report.detoxified, reject)?;
            (
                report.detoxified.clone(),
                rendered,
                Some(report.id.clone()),
            )
        };
        Ok(AlignmentExample {
            query: query.clone(),
            detox_reasoning,
            reject: reject.to_string(),
            rendered_target,
            provenance: Provenance {
                fuzz_report_id,
                reject_model: self.config.reject_model.clone(),
                prompt_template_ids: vec![self.safety_prefix.id().to_string()],
                pipeline_version: crate::PIPELINE_VERSION.to_string(),
            },
        })
    }

    /// Joins queries with their fuzz reports, generates rejects, and builds
    /// examples. Queries whose report failed (or is missing) are excluded
    /// up front without a reject call; failed reject checks are excluded
    /// with their reason. Exclusions are never silent.
    pub async fn assemble(
        &self,
        queries: &[Query],
        reports: &[FuzzReport],
        ablation: bool,
        parallelism: usize,
    ) -> Result<ForgeOutcome, DatasetError> {
        use futures::StreamExt;
        if queries.is_empty() {
            return Err(DatasetError::Precondition { what: "query list" });
        }
        let by_query: BTreeMap<&str, &FuzzReport> = reports
            .iter()
            .filter_map(|r| r.query_id.as_deref().map(|qid| (qid, r)))
            .collect();

        let mut eligible: Vec<(&Query, Option<&FuzzReport>)> = Vec::new();
        let mut exclusions = Vec::new();
        for query in queries {
            let report = by_query.get(query.id.as_str()).copied();
            if ablation {
                eligible.push((query, None));
                continue;
            }
            match report {
                Some(r) if r.passed() => eligible.push((query, Some(r))),
                Some(_) => exclusions.push(Exclusion {
                    id: query.id.clone(),
                    reason: "failed_fuzz".to_string(),
                }),
                None => exclusions.push(Exclusion {
                    id: query.id.clone(),
                    reason: "missing_fuzz_report".to_string(),
                }),
            }
        }

        let rejects: Vec<Result<String, DatasetError>> =
            futures::stream::iter(eligible.iter().map(|(q, _)| self.gen_reject(q)))
                .buffered(parallelism.max(1))
                .collect()
                .await;

        let mut examples = Vec::new();
        for ((query, report), reject) in eligible.into_iter().zip(rejects) {
            match reject {
                Ok(reject) => {
                    examples.push(self.build_example(query, report, &reject, ablation)?)
                }
                Err(DatasetError::RejectCheckFailed { id, reason }) => {
                    exclusions.push(Exclusion {
                        id,
                        reason: format!("failed_reject_check: {reason}"),
                    });
                }
                Err(other) => return Err(other),
            }
        }
        Ok(ForgeOutcome {
            examples,
            exclusions,
        })
    }
}

/// One emitted chat-JSONL line: a single user/assistant pair plus metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLine {
    pub messages: Vec<LineMessage>,
    pub meta: LineMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineMeta {
    pub query: Query,
    pub provenance: Provenance,
}

impl TrainingLine {
    pub fn from_example(example: &AlignmentExample) -> Self {
        TrainingLine {
            messages: vec![
                LineMessage {
                    role: "user".to_string(),
                    content: example.query.text.clone(),
                },
                LineMessage {
                    role: "assistant".to_string(),
                    content: example.rendered_target.clone(),
                },
            ],
            meta: LineMeta {
                query: example.query.clone(),
                provenance: example.provenance.clone(),
            },
        }
    }

    /// Recovers the full example; the assistant content must split cleanly.
    pub fn to_example(&self) -> Result<AlignmentExample, DatasetError> {
        let parse = |message: &str| DatasetError::LineParse {
            message: message.to_string(),
        };
        if self.messages.len() != 2
            || self.messages[0].role != "user"
            || self.messages[1].role != "assistant"
        {
            return Err(parse("expected exactly one user/assistant pair"));
        }
        if self.messages[0].content != self.meta.query.text {
            return Err(parse("user content differs from meta query text"));
        }
        let rendered = &self.messages[1].content;
        let output = split_output(rendered);
        if output.parse_status != ParseStatus::Clean {
            return Err(parse("assistant content does not split cleanly"));
        }
        let reject = output
            .response
            .strip_prefix('\n')
            .unwrap_or(&output.response)
            .to_string();
        let detox_reasoning = if output.reasoning.trim().is_empty() {
            String::new()
        } else {
            output.reasoning.clone()
        };
        Ok(AlignmentExample {
            query: self.meta.query.clone(),
            detox_reasoning,
            reject,
            rendered_target: rendered.clone(),
            provenance: self.meta.provenance.clone(),
        })
    }

    /// True when the assistant content keeps an empty think block.
    pub fn is_ablation_shape(&self) -> bool {
        let output = split_output(&self.messages[1].content);
        output.parse_status == ParseStatus::Clean && output.reasoning.trim().is_empty()
    }
}

/// Writes per-split JSONL files plus `manifest.json`, deduplicating
/// exact-duplicate user texts (first wins) and splitting with a seeded
/// shuffle. Re-running with the same seed partitions identically.
pub fn emit_dataset(
    examples: &[AlignmentExample],
    exclusions: &[Exclusion],
    out_dir: &Path,
    splits: &[SplitSpec],
    seed: u64,
    config_hash: &str,
) -> Result<DatasetManifest, DatasetError> {
    validate_splits(splits)?;

    let mut seen_ids = BTreeSet::new();
    for example in examples {
        if !seen_ids.insert(example.query.id.as_str()) {
            return Err(DatasetError::DuplicateId {
                id: example.query.id.clone(),
            });
        }
    }

    let mut seen_texts = BTreeSet::new();
    let mut kept: Vec<&AlignmentExample> = Vec::new();
    let mut duplicates_removed = 0usize;
    for example in examples {
        if seen_texts.insert(example.query.text.as_str()) {
            kept.push(example);
        } else {
            duplicates_removed += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kept.shuffle(&mut rng);

    let sizes = split_sizes(kept.len(), splits);
    let mut split_counts = BTreeMap::new();
    let mut cursor = 0usize;
    for (spec, size) in splits.iter().zip(&sizes) {
        let slice = &kept[cursor..cursor + size];
        cursor += size;
        let lines: Vec<TrainingLine> = slice.iter().map(|e| TrainingLine::from_example(e)).collect();
        let path = out_dir.join(format!("{}.jsonl", spec.name));
        jsonl::write_jsonl(&path, None, &lines)?;
        split_counts.insert(spec.name.clone(), *size);
    }

    let manifest = DatasetManifest {
        config_hash: config_hash.to_string(),
        seed,
        split_counts,
        input_examples: examples.len(),
        duplicates_removed,
        excluded: exclusions.to_vec(),
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, format!("{json}\n")).map_err(|e| DatasetError::ManifestIo {
        path,
        message: e.to_string(),
    })?;
    Ok(manifest)
}

fn validate_splits(splits: &[SplitSpec]) -> Result<(), DatasetError> {
    if splits.is_empty() {
        return Err(DatasetError::InvalidSplit("no splits given".to_string()));
    }
    let mut names = BTreeSet::new();
    let mut sum = 0.0;
    for spec in splits {
        if spec.name.trim().is_empty() {
            return Err(DatasetError::InvalidSplit("empty split name".to_string()));
        }
        if !names.insert(spec.name.as_str()) {
            return Err(DatasetError::InvalidSplit(format!(
                "duplicate split name `{}`",
                spec.name
            )));
        }
        if !(spec.fraction.is_finite() && spec.fraction > 0.0) {
            return Err(DatasetError::InvalidSplit(format!(
                "fraction for `{}` must be in (0, 1]",
                spec.name
            )));
        }
        sum += spec.fraction;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidSplit(format!(
            "fractions sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Floor each split's share, then hand leftover items to the splits in
/// declaration order.
fn split_sizes(total: usize, splits: &[SplitSpec]) -> Vec<usize> {
    let mut sizes: Vec<usize> = splits
        .iter()
        .map(|s| (s.fraction * total as f64).floor() as usize)
        .collect();
    let mut leftover = total - sizes.iter().sum::<usize>();
    let n = sizes.len();
    let mut i = 0;
    while leftover > 0 {
        sizes[i % n] += 1;
        leftover -= 1;
        i += 1;
    }
    sizes
}
