//! Reasoning-trace detoxification.
//!
//! A harmful trace is classified as procedural (actionable step-by-step
//! detail) or logical (argument for an improper claim), pushed through the
//! category's transform chain, reorganized into fluent text, and validated:
//! deterministic scanners catch residual quantities and blacklisted terms,
//! and a judge scores the three keep principles (logical chain, scientific
//! accuracy, semantic coherence). Reports that fail validation are kept for
//! audit but never enter a dataset.

mod scan;

pub use scan::{EntityScanner, LeakFinding, NumericScanner, DEFAULT_UNITS};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concretize::parse_answer_line;
use crate::gateway::{ChatExchange, ChatMessage, Gateway, GatewayError, PurposeTag};
use crate::template::Template;
use crate::trace::{trace_metrics, MetricsConfig};

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("{what} must be non-empty")]
    Precondition { what: &'static str },
    #[error("cannot build scanner pattern for `{term}`: {message}")]
    BadTerm { term: String, message: String },
    #[error("{what} has no usable terms")]
    EmptyTermList { what: &'static str },
    #[error("blacklist terms survived entity fuzzification: {}", terms.join(", "))]
    ResidualEntityLeaks { terms: Vec<String> },
    #[error("quantities survived numeric fuzzification: {}", spans.join(", "))]
    ResidualNumericLeaks { spans: Vec<String> },
    #[error("truncation output is longer than its input ({output_chars} > {input_chars} chars)")]
    TruncationTooLong {
        input_chars: usize,
        output_chars: usize,
    },
    #[error("truncation output keeps {steps} steps, cap is {cap}")]
    TruncationTooManySteps { steps: usize, cap: usize },
    #[error("reorganize reintroduced specifics: {details}")]
    ScannerRegression { details: String },
    #[error("keep-principle judge reply unparseable: {reply:?}")]
    JudgeParse { reply: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKindValue {
    Procedural,
    Logical,
    Unknown,
}

/// Classifier outcome. `fallback` is set only when the classifier reply was
/// unparseable and the step-marker heuristic decided the effective kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceKind {
    pub value: TraceKindValue,
    /// Raw classifier reply, kept for audit.
    pub confidence_note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<TraceKindValue>,
}

impl TraceKind {
    /// The kind the pipeline acts on: the classified value, or the recorded
    /// heuristic fallback when the classifier was unparseable.
    pub fn effective(&self) -> TraceKindValue {
        match self.value {
            TraceKindValue::Unknown => self.fallback.unwrap_or(TraceKindValue::Logical),
            v => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformName {
    EntityFuzz,
    NumericFuzz,
    ChainTruncate,
    ConceptDeconstruct,
    Reorganize,
}

impl TransformName {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformName::EntityFuzz => "entity_fuzz",
            TransformName::NumericFuzz => "numeric_fuzz",
            TransformName::ChainTruncate => "chain_truncate",
            TransformName::ConceptDeconstruct => "concept_deconstruct",
            TransformName::Reorganize => "reorganize",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformStep {
    pub name: TransformName,
    pub before_excerpt: String,
    pub after_excerpt: String,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum KeepCheck {
    LogicalChain,
    ScientificAccuracy,
    SemanticCoherence,
}

impl KeepCheck {
    pub const ALL: [KeepCheck; 3] = [
        KeepCheck::LogicalChain,
        KeepCheck::ScientificAccuracy,
        KeepCheck::SemanticCoherence,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            KeepCheck::LogicalChain => "logical_chain",
            KeepCheck::ScientificAccuracy => "scientific_accuracy",
            KeepCheck::SemanticCoherence => "semantic_coherence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub passed: bool,
    pub rationale: String,
}

/// Scanner findings plus judge verdicts over a detoxified trace.
/// `passed` holds iff both leak lists are empty and all keep checks pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationResult {
    pub numeric_leaks: Vec<LeakFinding>,
    pub entity_leaks: Vec<LeakFinding>,
    pub keep_checks: BTreeMap<KeepCheck, CheckOutcome>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum FuzzStatus {
    Completed,
    Failed { stage: String, error: String },
}

/// Full audit record for one detoxification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuzzReport {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub original: String,
    pub kind: TraceKind,
    pub transforms: Vec<TransformStep>,
    pub detoxified: String,
    /// Present once the pipeline reached validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationResult>,
    pub prompts_used: Vec<String>,
    pub status: FuzzStatus,
}

impl FuzzReport {
    /// Completed and validated clean: eligible for dataset assembly.
    pub fn passed(&self) -> bool {
        self.status == FuzzStatus::Completed
            && self.validation.as_ref().map(|v| v.passed).unwrap_or(false)
    }
}

#[derive(Debug, Clone)]
pub struct FuzzifierConfig {
    /// Model for the transform stages.
    pub fuzz_model: String,
    /// Model for trace classification (greedy).
    pub classifier_model: String,
    /// Model for the keep-principle checks (greedy).
    pub judge_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Cap on enumerated steps surviving chain truncation.
    pub max_steps: usize,
}

impl FuzzifierConfig {
    pub fn new(
        fuzz_model: impl Into<String>,
        classifier_model: impl Into<String>,
        judge_model: impl Into<String>,
    ) -> Self {
        FuzzifierConfig {
            fuzz_model: fuzz_model.into(),
            classifier_model: classifier_model.into(),
            judge_model: judge_model.into(),
            temperature: PurposeTag::Fuzz.default_temperature(),
            max_tokens: 2048,
            max_steps: 4,
        }
    }
}

/// Templates for the classifier, the five transforms, and the keep judge.
///
/// Transform templates receive the working text as `{reasoning}` (truncation
/// also gets `{max_steps}`); the keep judge gets `{original}` and
/// `{detoxified}`.
#[derive(Debug, Clone)]
pub struct FuzzifierTemplates {
    pub classify: Template,
    pub entity: Template,
    pub numeric: Template,
    pub truncate: Template,
    pub deconstruct: Template,
    pub reorganize: Template,
    pub keep_judge: Template,
}

impl FuzzifierTemplates {
    pub fn ids(&self) -> Vec<String> {
        vec![
            self.classify.id().to_string(),
            self.entity.id().to_string(),
            self.numeric.id().to_string(),
            self.truncate.id().to_string(),
            self.deconstruct.id().to_string(),
            self.reorganize.id().to_string(),
            self.keep_judge.id().to_string(),
        ]
    }
}

pub struct Fuzzifier {
    gateway: Arc<Gateway>,
    config: FuzzifierConfig,
    templates: FuzzifierTemplates,
    numeric_scanner: NumericScanner,
    entity_scanner: EntityScanner,
    metrics: MetricsConfig,
}

impl Fuzzifier {
    pub fn new(
        gateway: Arc<Gateway>,
        config: FuzzifierConfig,
        templates: FuzzifierTemplates,
        numeric_scanner: NumericScanner,
        entity_scanner: EntityScanner,
    ) -> Self {
        Fuzzifier {
            gateway,
            config,
            templates,
            numeric_scanner,
            entity_scanner,
            metrics: MetricsConfig::default_lexicon(),
        }
    }

    pub fn numeric_scanner(&self) -> &NumericScanner {
        &self.numeric_scanner
    }

    pub fn entity_scanner(&self) -> &EntityScanner {
        &self.entity_scanner
    }

    /// Classifies a trace as procedural or logical. An unparseable classifier
    /// reply yields `unknown` with the step-marker heuristic (two or more
    /// enumerated steps means procedural) recorded as the fallback.
    pub async fn classify_trace(&self, reasoning: &str) -> Result<TraceKind, FuzzError> {
        non_empty(reasoning, "reasoning")?;
        let prompt = self.templates.classify.render(&[("reasoning", reasoning)]);
        let exchange = ChatExchange::new(
            PurposeTag::Extract,
            &self.config.classifier_model,
            vec![ChatMessage::user(prompt)],
        )?
        .with_max_tokens(self.config.max_tokens)?;
        let raw = self.gateway.complete(&exchange).await?;
        let parsed = parse_answer_line(&raw).and_then(|answer| {
            match answer.to_lowercase().as_str() {
                "procedural" => Some(TraceKindValue::Procedural),
                "logical" => Some(TraceKindValue::Logical),
                _ => None,
            }
        });
        Ok(match parsed {
            Some(value) => TraceKind {
                value,
                confidence_note: raw,
                fallback: None,
            },
            None => {
                let steps = trace_metrics(reasoning, &self.metrics).step_count;
                let fallback = if steps >= 2 {
                    TraceKindValue::Procedural
                } else {
                    TraceKindValue::Logical
                };
                TraceKind {
                    value: TraceKindValue::Unknown,
                    confidence_note: raw,
                    fallback: Some(fallback),
                }
            }
        })
    }

    /// Replaces harmful specifics with higher-level concepts. Output must be
    /// blacklist-clean; one corrective retry, then failure.
    pub async fn fuzz_entities(&self, reasoning: &str) -> Result<String, FuzzError> {
        non_empty(reasoning, "reasoning")?;
        self.run_transform(&self.templates.entity, reasoning, &[], |out| {
            let terms = self.entity_scanner.terms_in(out);
            if terms.is_empty() {
                Ok(())
            } else {
                Err(FuzzError::ResidualEntityLeaks { terms })
            }
        })
        .await
    }

    /// Replaces key parameters with unspecific wording. Output must carry no
    /// quantity-with-unit pattern; one corrective retry, then failure.
    pub async fn fuzz_numerics(&self, reasoning: &str) -> Result<String, FuzzError> {
        non_empty(reasoning, "reasoning")?;
        self.run_transform(&self.templates.numeric, reasoning, &[], |out| {
            let leaks = self.numeric_scanner.scan(out);
            if leaks.is_empty() {
                Ok(())
            } else {
                Err(FuzzError::ResidualNumericLeaks {
                    spans: leaks.into_iter().map(|l| l.span).collect(),
                })
            }
        })
        .await
    }

    /// Compresses an operation chain to key steps and their direct results.
    /// The output may not be longer than the input, may not exceed
    /// `max_steps` steps, and never gains steps over the input.
    pub async fn truncate_chain(&self, reasoning: &str) -> Result<String, FuzzError> {
        non_empty(reasoning, "reasoning")?;
        let input_chars = reasoning.chars().count();
        let input_steps = trace_metrics(reasoning, &self.metrics).step_count;
        let cap = if input_steps >= 1 {
            self.config.max_steps.min(input_steps)
        } else {
            self.config.max_steps
        };
        let max_steps = self.config.max_steps.to_string();
        self.run_transform(
            &self.templates.truncate,
            reasoning,
            &[("max_steps", max_steps.as_str())],
            |out| {
                let output_chars = out.chars().count();
                if output_chars > input_chars {
                    return Err(FuzzError::TruncationTooLong {
                        input_chars,
                        output_chars,
                    });
                }
                let steps = trace_metrics(out, &self.metrics).step_count;
                if steps > cap {
                    return Err(FuzzError::TruncationTooManySteps { steps, cap });
                }
                Ok(())
            },
        )
        .await
    }

    /// Corrects misleading or demeaning claims; judged downstream by the
    /// keep checks rather than a deterministic scanner.
    pub async fn deconstruct_concepts(&self, reasoning: &str) -> Result<String, FuzzError> {
        non_empty(reasoning, "reasoning")?;
        self.run_transform(&self.templates.deconstruct, reasoning, &[], |_| Ok(()))
            .await
    }

    /// Merges post-transform text into one fluent trace. Reorganization may
    /// not reintroduce specifics: both scanners must stay clean.
    pub async fn reorganize(&self, reasoning: &str) -> Result<String, FuzzError> {
        non_empty(reasoning, "reasoning")?;
        self.run_transform(&self.templates.reorganize, reasoning, &[], |out| {
            let numeric = self.numeric_scanner.scan(out);
            let entity = self.entity_scanner.scan(out);
            if numeric.is_empty() && entity.is_empty() {
                Ok(())
            } else {
                let details: Vec<String> = numeric
                    .iter()
                    .chain(entity.iter())
                    .map(|l| l.span.clone())
                    .collect();
                Err(FuzzError::ScannerRegression {
                    details: details.join(", "),
                })
            }
        })
        .await
    }

    /// Scans the detoxified text and runs the keep-principle judge.
    pub async fn validate_detox(
        &self,
        original: &str,
        detoxified: &str,
    ) -> Result<ValidationResult, FuzzError> {
        non_empty(original, "original")?;
        non_empty(detoxified, "detoxified")?;
        let numeric_leaks = self.numeric_scanner.scan(detoxified);
        let entity_leaks = self.entity_scanner.scan(detoxified);
        let prompt = self
            .templates
            .keep_judge
            .render(&[("original", original), ("detoxified", detoxified)]);
        let exchange = ChatExchange::new(
            PurposeTag::Judge,
            &self.config.judge_model,
            vec![ChatMessage::user(prompt)],
        )?
        .with_max_tokens(self.config.max_tokens)?;
        let raw = self.gateway.complete(&exchange).await?;
        let keep_checks = parse_keep_reply(&raw)?;
        let passed = numeric_leaks.is_empty()
            && entity_leaks.is_empty()
            && keep_checks.values().all(|c| c.passed);
        Ok(ValidationResult {
            numeric_leaks,
            entity_leaks,
            keep_checks,
            passed,
        })
    }

    /// The full pipeline: classify, apply the kind's transforms in order,
    /// reorganize, validate. Stage failures come back as a report marked
    /// failed at the offending stage; validation failure marks the report
    /// failed-validation (excluded from datasets, never silently repaired).
    pub async fn fuzz(&self, reasoning: &str) -> Result<FuzzReport, FuzzError> {
        self.fuzz_with_id(None, reasoning).await
    }

    pub async fn fuzz_with_id(
        &self,
        query_id: Option<&str>,
        reasoning: &str,
    ) -> Result<FuzzReport, FuzzError> {
        non_empty(reasoning, "reasoning")?;
        let id = match query_id {
            Some(qid) => format!("fz-{qid}"),
            None => format!("fz-{}", short_hash(reasoning)),
        };
        let mut report = FuzzReport {
            id,
            query_id: query_id.map(str::to_string),
            original: reasoning.to_string(),
            kind: TraceKind {
                value: TraceKindValue::Unknown,
                confidence_note: String::new(),
                fallback: None,
            },
            transforms: Vec::new(),
            detoxified: String::new(),
            validation: None,
            prompts_used: self.templates.ids(),
            status: FuzzStatus::Completed,
        };

        macro_rules! stage {
            ($name:expr, $fut:expr) => {
                match $fut.await {
                    Ok(value) => value,
                    Err(err) => {
                        report.status = FuzzStatus::Failed {
                            stage: $name.to_string(),
                            error: err.to_string(),
                        };
                        return Ok(report);
                    }
                }
            };
        }

        report.kind = stage!("classify", self.classify_trace(reasoning));

        let plan: &[TransformName] = match report.kind.effective() {
            TraceKindValue::Procedural => &[
                TransformName::EntityFuzz,
                TransformName::NumericFuzz,
                TransformName::ChainTruncate,
            ],
            TraceKindValue::Logical | TraceKindValue::Unknown => &[
                TransformName::EntityFuzz,
                TransformName::ConceptDeconstruct,
            ],
        };

        let mut text = reasoning.to_string();
        for name in plan {
            let out = match name {
                TransformName::EntityFuzz => stage!(name.as_str(), self.fuzz_entities(&text)),
                TransformName::NumericFuzz => stage!(name.as_str(), self.fuzz_numerics(&text)),
                TransformName::ChainTruncate => stage!(name.as_str(), self.truncate_chain(&text)),
                TransformName::ConceptDeconstruct => {
                    stage!(name.as_str(), self.deconstruct_concepts(&text))
                }
                TransformName::Reorganize => unreachable!("reorganize runs after the plan"),
            };
            report.transforms.push(TransformStep {
                name: *name,
                before_excerpt: excerpt(&text),
                after_excerpt: excerpt(&out),
            });
            text = out;
        }

        let reorganized = stage!(
            TransformName::Reorganize.as_str(),
            self.reorganize(&text)
        );
        report.transforms.push(TransformStep {
            name: TransformName::Reorganize,
            before_excerpt: excerpt(&text),
            after_excerpt: excerpt(&reorganized),
        });

        let validation = stage!("validate", self.validate_detox(reasoning, &reorganized));
        report.detoxified = reorganized;
        report.validation = Some(validation);
        Ok(report)
    }

    /// Detoxifies a batch of (query id, reasoning) pairs, one report per
    /// input in order. Empty traces become failed records, never drops.
    pub async fn fuzz_batch(
        &self,
        traces: &[(String, String)],
        parallelism: usize,
    ) -> Result<Vec<FuzzReport>, FuzzError> {
        use futures::StreamExt;
        if traces.is_empty() {
            return Err(FuzzError::Precondition {
                what: "trace batch",
            });
        }
        let reports: Vec<FuzzReport> =
            futures::stream::iter(traces.iter().map(|(qid, reasoning)| async move {
                if reasoning.is_empty() {
                    return FuzzReport {
                        id: format!("fz-{qid}"),
                        query_id: Some(qid.clone()),
                        original: String::new(),
                        kind: TraceKind {
                            value: TraceKindValue::Unknown,
                            confidence_note: String::new(),
                            fallback: None,
                        },
                        transforms: Vec::new(),
                        detoxified: String::new(),
                        validation: None,
                        prompts_used: self.templates.ids(),
                        status: FuzzStatus::Failed {
                            stage: "precondition".to_string(),
                            error: "reasoning must be non-empty".to_string(),
                        },
                    };
                }
                self.fuzz_with_id(Some(qid), reasoning)
                    .await
                    .expect("non-empty trace never hard-errors")
            }))
            .buffered(parallelism.max(1))
            .collect()
            .await;
        Ok(reports)
    }

    /// Runs one transform with its deterministic check; on a check failure,
    /// retries once with a corrective note, then fails hard.
    async fn run_transform<F>(
        &self,
        template: &Template,
        reasoning: &str,
        extra_vars: &[(&str, &str)],
        check: F,
    ) -> Result<String, FuzzError>
    where
        F: Fn(&str) -> Result<(), FuzzError>,
    {
        let mut vars = vec![("reasoning", reasoning)];
        vars.extend_from_slice(extra_vars);
        let prompt = template.render(&vars);
        let first = self.transform_call(prompt.clone()).await?;
        let first_err = match check(&first) {
            Ok(()) => return Ok(first),
            Err(err) => err,
        };
        let retry_prompt = format!(
            "{prompt}\n\nYour previous attempt was rejected: {first_err}. \
             Produce a corrected version that avoids this."
        );
        let second = self.transform_call(retry_prompt).await?;
        check(&second)?;
        Ok(second)
    }

    async fn transform_call(&self, prompt: String) -> Result<String, FuzzError> {
        let exchange = ChatExchange::new(
            PurposeTag::Fuzz,
            &self.config.fuzz_model,
            vec![ChatMessage::user(prompt)],
        )?
        .with_temperature(self.config.temperature)?
        .with_max_tokens(self.config.max_tokens)?;
        let raw = self.gateway.complete(&exchange).await?;
        Ok(raw.trim().to_string())
    }
}

fn non_empty(text: &str, what: &'static str) -> Result<(), FuzzError> {
    if text.is_empty() {
        Err(FuzzError::Precondition { what })
    } else {
        Ok(())
    }
}

fn excerpt(text: &str) -> String {
    const LIMIT: usize = 160;
    let mut out: String = text.chars().take(LIMIT).collect();
    if text.chars().count() > LIMIT {
        out.push('…');
    }
    out
}

fn short_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(text.as_bytes())[..6])
}

/// Parses the keep judge's reply: one `<check>: pass|fail — rationale` line
/// per check, all three required.
fn parse_keep_reply(reply: &str) -> Result<BTreeMap<KeepCheck, CheckOutcome>, FuzzError> {
    let mut checks = BTreeMap::new();
    for line in reply.lines() {
        let line = line.trim().trim_start_matches(['-', '*', ' ']);
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim().to_lowercase().replace([' ', '-'], "_");
        let Some(check) = KeepCheck::ALL.iter().find(|c| c.as_str() == key) else {
            continue;
        };
        let rest = rest.trim();
        let lower = rest.to_lowercase();
        let passed = if lower.starts_with("pass") {
            true
        } else if lower.starts_with("fail") {
            false
        } else {
            continue;
        };
        let rationale = rest
            .splitn(2, char::is_whitespace)
            .nth(1)
            .unwrap_or("")
            .trim_start_matches(['-', '—', '–', ':', ' '])
            .trim()
            .to_string();
        checks.insert(*check, CheckOutcome { passed, rationale });
    }
    if KeepCheck::ALL.iter().all(|c| checks.contains_key(c)) {
        Ok(checks)
    } else {
        Err(FuzzError::JudgeParse {
            reply: reply.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FixtureStore, GatewayConfig, GatewayMode};

    fn templates() -> FuzzifierTemplates {
        let t = |stem: &str, text: &str| Template::from_text(stem, text.to_string()).unwrap();
        FuzzifierTemplates {
            classify: t("classify", "Classify this trace.\n{reasoning}\nANSWER: <kind>"),
            entity: t("fuzz_entity", "Abstract the specifics.\nText:\n{reasoning}"),
            numeric: t("fuzz_numeric", "Vague the quantities.\nText:\n{reasoning}"),
            truncate: t(
                "fuzz_truncate",
                "Keep at most {max_steps} steps.\nText:\n{reasoning}",
            ),
            deconstruct: t("fuzz_deconstruct", "Correct the claims.\nText:\n{reasoning}"),
            reorganize: t("fuzz_reorganize", "Merge fluently.\nText:\n{reasoning}"),
            keep_judge: t(
                "keep_judge",
                "Compare.\nOriginal:\n{original}\nDetoxified:\n{detoxified}",
            ),
        }
    }

    struct Rig {
        fuzzifier: Fuzzifier,
        store: FixtureStore,
        _dir: tempfile::TempDir,
    }

    fn rig() -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        let gateway =
            Gateway::new(GatewayConfig::offline(GatewayMode::Replay, dir.path())).unwrap();
        let numeric = NumericScanner::new(
            &DEFAULT_UNITS.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        )
        .unwrap();
        let entity = EntityScanner::new(&["pyrovex".to_string(), "nightlock".to_string()])
            .unwrap();
        let fuzzifier = Fuzzifier::new(
            Arc::new(gateway),
            FuzzifierConfig::new("fz", "cls", "jd"),
            templates(),
            numeric,
            entity,
        );
        Rig {
            fuzzifier,
            store,
            _dir: dir,
        }
    }

    impl Rig {
        fn seed_purpose(&self, purpose: PurposeTag, model: &str, prompt: String, reply: &str) {
            let mut e =
                ChatExchange::new(purpose, model, vec![ChatMessage::user(prompt)]).unwrap();
            e = match purpose {
                PurposeTag::Fuzz => e
                    .with_temperature(self.fuzzifier.config.temperature)
                    .unwrap(),
                _ => e,
            };
            e = e.with_max_tokens(self.fuzzifier.config.max_tokens).unwrap();
            self.store.store(&e, &e.cache_key(), reply).unwrap();
        }

        fn seed_classify(&self, reasoning: &str, reply: &str) {
            let prompt = self
                .fuzzifier
                .templates
                .classify
                .render(&[("reasoning", reasoning)]);
            self.seed_purpose(PurposeTag::Extract, "cls", prompt, reply);
        }

        fn seed_transform(&self, template: &Template, reasoning: &str, reply: &str) {
            let prompt = template.render(&[("reasoning", reasoning)]);
            self.seed_purpose(PurposeTag::Fuzz, "fz", prompt, reply);
        }

        fn seed_truncate(&self, reasoning: &str, reply: &str) {
            let prompt = self.fuzzifier.templates.truncate.render(&[
                ("reasoning", reasoning),
                ("max_steps", "4"),
            ]);
            self.seed_purpose(PurposeTag::Fuzz, "fz", prompt, reply);
        }

        fn seed_retry(&self, template: &Template, reasoning: &str, err: &str, reply: &str) {
            let prompt = template.render(&[("reasoning", reasoning)]);
            let retry = format!(
                "{prompt}\n\nYour previous attempt was rejected: {err}. \
                 Produce a corrected version that avoids this."
            );
            self.seed_purpose(PurposeTag::Fuzz, "fz", retry, reply);
        }

        fn seed_keep_judge(&self, original: &str, detoxified: &str, reply: &str) {
            let prompt = self
                .fuzzifier
                .templates
                .keep_judge
                .render(&[("original", original), ("detoxified", detoxified)]);
            self.seed_purpose(PurposeTag::Judge, "jd", prompt, reply);
        }
    }

    const KEEP_PASS: &str = "logical_chain: pass — chain held\n\
                             scientific_accuracy: pass — nothing invented\n\
                             semantic_coherence: pass — reads fine";

    #[tokio::test]
    async fn classify_parses_answer() {
        let rig = rig();
        rig.seed_classify("Step 1: a. Step 2: b.", "ANSWER: procedural");
        let kind = rig.fuzzifier.classify_trace("Step 1: a. Step 2: b.").await.unwrap();
        assert_eq!(kind.value, TraceKindValue::Procedural);
        assert_eq!(kind.fallback, None);
        assert_eq!(kind.effective(), TraceKindValue::Procedural);
    }

    #[tokio::test]
    async fn classify_fallback_on_garbage_reply() {
        let rig = rig();
        rig.seed_classify("Step 1: a. Step 2: b.", "banana");
        let kind = rig.fuzzifier.classify_trace("Step 1: a. Step 2: b.").await.unwrap();
        assert_eq!(kind.value, TraceKindValue::Unknown);
        assert_eq!(kind.fallback, Some(TraceKindValue::Procedural));
        assert_eq!(kind.confidence_note, "banana");

        rig.seed_classify("just an argument, no steps", "banana");
        let kind = rig
            .fuzzifier
            .classify_trace("just an argument, no steps")
            .await
            .unwrap();
        assert_eq!(kind.fallback, Some(TraceKindValue::Logical));
    }

    #[tokio::test]
    async fn entity_fuzz_enforces_blacklist() {
        let rig = rig();
        rig.seed_transform(
            &rig.fuzzifier.templates.entity,
            "mix pyrovex now",
            "mix a hazardous compound now",
        );
        let out = rig.fuzzifier.fuzz_entities("mix pyrovex now").await.unwrap();
        assert_eq!(out, "mix a hazardous compound now");
    }

    #[tokio::test]
    async fn entity_fuzz_retries_once_then_fails() {
        let rig = rig();
        let input = "mix pyrovex now";
        rig.seed_transform(&rig.fuzzifier.templates.entity, input, "still pyrovex here");
        let err = FuzzError::ResidualEntityLeaks {
            terms: vec!["pyrovex".to_string()],
        };
        rig.seed_retry(
            &rig.fuzzifier.templates.entity,
            input,
            &err.to_string(),
            "pyrovex again, twice pyrovex",
        );
        let got = rig.fuzzifier.fuzz_entities(input).await.unwrap_err();
        assert!(matches!(got, FuzzError::ResidualEntityLeaks { .. }));
    }

    #[tokio::test]
    async fn entity_fuzz_retry_can_succeed() {
        let rig = rig();
        let input = "mix pyrovex now";
        rig.seed_transform(&rig.fuzzifier.templates.entity, input, "still pyrovex here");
        let err = FuzzError::ResidualEntityLeaks {
            terms: vec!["pyrovex".to_string()],
        };
        rig.seed_retry(
            &rig.fuzzifier.templates.entity,
            input,
            &err.to_string(),
            "mix a hazardous compound now",
        );
        let out = rig.fuzzifier.fuzz_entities(input).await.unwrap();
        assert_eq!(out, "mix a hazardous compound now");
    }

    #[tokio::test]
    async fn numeric_fuzz_scanner_oracle() {
        let rig = rig();
        let input = "heat to 450°C for 2 hours";
        rig.seed_transform(
            &rig.fuzzifier.templates.numeric,
            input,
            "heat to a high temperature for a long while",
        );
        let out = rig.fuzzifier.fuzz_numerics(input).await.unwrap();
        assert!(rig.fuzzifier.numeric_scanner.scan(&out).is_empty());
    }

    #[tokio::test]
    async fn truncation_must_not_grow() {
        let rig = rig();
        let input = "Step 1: a.";
        rig.seed_truncate(input, "Step 1: a, expanded with lots of extra words.");
        let err = FuzzError::TruncationTooLong {
            input_chars: input.chars().count(),
            output_chars: "Step 1: a, expanded with lots of extra words.".chars().count(),
        };
        let retry_reply = "Step 1: a, expanded with even more words than before.";
        let prompt = rig.fuzzifier.templates.truncate.render(&[
            ("reasoning", input),
            ("max_steps", "4"),
        ]);
        let retry = format!(
            "{prompt}\n\nYour previous attempt was rejected: {err}. \
             Produce a corrected version that avoids this."
        );
        rig.seed_purpose(PurposeTag::Fuzz, "fz", retry, retry_reply);
        let got = rig.fuzzifier.truncate_chain(input).await.unwrap_err();
        assert!(matches!(got, FuzzError::TruncationTooLong { .. }));
    }

    #[tokio::test]
    async fn truncation_never_pads_steps() {
        let rig = rig();
        let input = "Step 1: combine the parts carefully. Step 2: let it settle down.";
        // Input has 2 steps; an output with 3 steps violates the cap even
        // though 3 < max_steps.
        let bad = "Step 1: combine. Step 2: settle. Step 3: done.";
        rig.seed_truncate(input, bad);
        let err = FuzzError::TruncationTooManySteps { steps: 3, cap: 2 };
        let prompt = rig.fuzzifier.templates.truncate.render(&[
            ("reasoning", input),
            ("max_steps", "4"),
        ]);
        let retry = format!(
            "{prompt}\n\nYour previous attempt was rejected: {err}. \
             Produce a corrected version that avoids this."
        );
        rig.seed_purpose(PurposeTag::Fuzz, "fz", retry, "Step 1: combine. Step 2: settle.");
        let out = rig.fuzzifier.truncate_chain(input).await.unwrap();
        assert_eq!(out, "Step 1: combine. Step 2: settle.");
    }

    #[tokio::test]
    async fn reorganize_rejects_reintroduced_specifics() {
        let rig = rig();
        let input = "use a mild heat for a while";
        rig.seed_transform(&rig.fuzzifier.templates.reorganize, input, "use 450°C heat");
        let err = FuzzError::ScannerRegression {
            details: "450°C".to_string(),
        };
        rig.seed_retry(
            &rig.fuzzifier.templates.reorganize,
            input,
            &err.to_string(),
            "use 451°C heat",
        );
        let got = rig.fuzzifier.reorganize(input).await.unwrap_err();
        assert!(matches!(got, FuzzError::ScannerRegression { .. }));
    }

    #[tokio::test]
    async fn validate_flags_leaks_and_fails() {
        let rig = rig();
        let original = "mix 30 mL of pyrovex";
        let detoxified = "mix 30 mL of pyrovex as before";
        rig.seed_keep_judge(original, detoxified, KEEP_PASS);
        let v = rig
            .fuzzifier
            .validate_detox(original, detoxified)
            .await
            .unwrap();
        assert_eq!(v.numeric_leaks.len(), 1);
        assert_eq!(v.entity_leaks.len(), 1);
        assert!(!v.passed);
    }

    #[tokio::test]
    async fn validate_identity_benign_passes() {
        let rig = rig();
        let text = "a careful plan stated in general terms";
        rig.seed_keep_judge(text, text, KEEP_PASS);
        let v = rig.fuzzifier.validate_detox(text, text).await.unwrap();
        assert!(v.passed);
        assert_eq!(v.keep_checks.len(), 3);
    }

    #[tokio::test]
    async fn validate_keep_failure_fails() {
        let rig = rig();
        let reply = "logical_chain: pass — ok\nscientific_accuracy: fail — invented claims\n\
                     semantic_coherence: pass — ok";
        rig.seed_keep_judge("a", "b", reply);
        let v = rig.fuzzifier.validate_detox("a", "b").await.unwrap();
        assert!(!v.passed);
        assert!(!v.keep_checks[&KeepCheck::ScientificAccuracy].passed);
        assert_eq!(
            v.keep_checks[&KeepCheck::ScientificAccuracy].rationale,
            "invented claims"
        );
    }

    #[tokio::test]
    async fn validate_empty_detoxified_rejected() {
        let rig = rig();
        assert!(matches!(
            rig.fuzzifier.validate_detox("a", "").await.unwrap_err(),
            FuzzError::Precondition { .. }
        ));
    }

    #[test]
    fn keep_reply_missing_check_is_parse_error() {
        let reply = "logical_chain: pass — ok\nsemantic_coherence: pass — ok";
        assert!(matches!(
            parse_keep_reply(reply),
            Err(FuzzError::JudgeParse { .. })
        ));
    }

    #[tokio::test]
    async fn fuzz_runs_procedural_plan_in_order() {
        let rig = rig();
        let input = "Step 1: get pyrovex. Step 2: heat to 450°C. Step 3: wait.";
        rig.seed_classify(input, "ANSWER: procedural");
        let after_entity = "Step 1: get a hazardous compound. Step 2: heat to 450°C. Step 3: wait.";
        rig.seed_transform(&rig.fuzzifier.templates.entity, input, after_entity);
        let after_numeric = "Step 1: get a hazardous compound. Step 2: heat. Step 3: wait.";
        rig.seed_transform(&rig.fuzzifier.templates.numeric, after_entity, after_numeric);
        let after_truncate = "Step 1: prepare. Step 2: heat briefly.";
        rig.seed_truncate(after_numeric, after_truncate);
        let reorganized = "Prepare the material, then heat briefly.";
        rig.seed_transform(&rig.fuzzifier.templates.reorganize, after_truncate, reorganized);
        rig.seed_keep_judge(input, reorganized, KEEP_PASS);

        let report = rig.fuzzifier.fuzz_with_id(Some("q1"), input).await.unwrap();
        assert!(report.passed());
        assert_eq!(report.detoxified, reorganized);
        let names: Vec<TransformName> = report.transforms.iter().map(|t| t.name).collect();
        assert_eq!(
            names,
            vec![
                TransformName::EntityFuzz,
                TransformName::NumericFuzz,
                TransformName::ChainTruncate,
                TransformName::Reorganize,
            ]
        );
        assert_eq!(report.id, "fz-q1");
    }

    #[tokio::test]
    async fn fuzz_runs_logical_plan_in_order() {
        let rig = rig();
        let input = "people who like nightlock are naturally lesser, which follows because...";
        rig.seed_classify(input, "ANSWER: logical");
        let after_entity = "people in a certain group are naturally lesser, which follows because...";
        rig.seed_transform(&rig.fuzzifier.templates.entity, input, after_entity);
        let after_deconstruct =
            "the claim that any group is naturally lesser is inaccurate and unsupported";
        rig.seed_transform(&rig.fuzzifier.templates.deconstruct, after_entity, after_deconstruct);
        let reorganized = "The claim that any group is lesser is inaccurate and unsupported.";
        rig.seed_transform(&rig.fuzzifier.templates.reorganize, after_deconstruct, reorganized);
        rig.seed_keep_judge(input, reorganized, KEEP_PASS);

        let report = rig.fuzzifier.fuzz(input).await.unwrap();
        assert!(report.passed());
        let names: Vec<TransformName> = report.transforms.iter().map(|t| t.name).collect();
        assert_eq!(
            names,
            vec![
                TransformName::EntityFuzz,
                TransformName::ConceptDeconstruct,
                TransformName::Reorganize,
            ]
        );
    }

    #[tokio::test]
    async fn fuzz_stage_failure_marks_report() {
        let rig = rig();
        let input = "Step 1: a. Step 2: b.";
        rig.seed_classify(input, "ANSWER: procedural");
        // No entity-transform fixture: replay miss at the first transform.
        let report = rig.fuzzifier.fuzz(input).await.unwrap();
        match &report.status {
            FuzzStatus::Failed { stage, .. } => assert_eq!(stage, "entity_fuzz"),
            other => panic!("expected failure, got {other:?}"),
        }
        assert!(!report.passed());
        assert!(report.validation.is_none());
    }

    #[tokio::test]
    async fn fuzz_empty_trace_is_precondition_error() {
        let rig = rig();
        assert!(matches!(
            rig.fuzzifier.fuzz("").await.unwrap_err(),
            FuzzError::Precondition { .. }
        ));
    }
}
