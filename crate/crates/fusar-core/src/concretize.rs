//! Three-stage concretization rewriter with a full audit trail.
//!
//! Stage 1 states the intent behind a question, stage 2 associates the intent
//! with concrete things, stage 3 rewrites the question to be more specific
//! using that context. Each stage's raw model reply is kept in the record.
//! Stage replies must end with a mandatory `ANSWER:` line; replies without it
//! are parse failures, never best-effort guesses, and replies matching the
//! refusal pattern list are reported separately as stage refusals.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatExchange, ChatMessage, Gateway, GatewayError, PurposeTag};
use crate::template::Template;
use crate::trace::{Query, Source, TraceError};

pub const ANSWER_DELIMITER: &str = "ANSWER:";

pub const DEFAULT_REFUSAL_PATTERNS: &[&str] = &[
    "i'm sorry",
    "i am sorry",
    "i can't assist",
    "i cannot assist",
    "i can't help",
    "i cannot help",
    "i won't help",
    "i will not help",
    "i must decline",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Intent,
    Associate,
    Rewrite,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Intent => "intent",
            Stage::Associate => "associate",
            Stage::Rewrite => "rewrite",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ConcretizeError {
    #[error("query `{id}` must be an origin query")]
    NotOrigin { id: String },
    #[error("{what} must be non-empty")]
    EmptyInput { what: &'static str },
    #[error("stage {stage}: reply has no `{ANSWER_DELIMITER}` line: {reply:?}")]
    Unparseable { stage: Stage, reply: String },
    #[error("stage {stage}: model refused: {reply:?}")]
    StageRefusal { stage: Stage, reply: String },
    #[error("stage associate: zero associations parsed: {reply:?}")]
    ZeroAssociations { reply: String },
    #[error("rewrite text is identical to the origin question")]
    IdenticalRewrite,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone)]
pub struct ConcretizerConfig {
    pub model: String,
    /// Sampling temperature for all three stages.
    pub temperature: f64,
    pub max_tokens: u32,
    /// Upper bound on kept associations (K).
    pub max_associations: usize,
    /// Case-insensitive substrings that mark a stage reply as a refusal.
    pub refusal_patterns: Vec<String>,
}

impl ConcretizerConfig {
    pub fn new(model: impl Into<String>) -> Self {
        ConcretizerConfig {
            model: model.into(),
            temperature: PurposeTag::Rewrite.default_temperature(),
            max_tokens: 1024,
            max_associations: 5,
            refusal_patterns: DEFAULT_REFUSAL_PATTERNS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// The three stage templates. Placeholders: `{question}` (intent),
/// `{intent}` and `{max_associations}` (associate), `{question}`,
/// `{intent}`, `{associations}` (rewrite).
#[derive(Debug, Clone)]
pub struct ConcretizerTemplates {
    pub intent: Template,
    pub associate: Template,
    pub rewrite: Template,
}

impl ConcretizerTemplates {
    pub fn ids(&self) -> Vec<String> {
        vec![
            self.intent.id().to_string(),
            self.associate.id().to_string(),
            self.rewrite.id().to_string(),
        ]
    }
}

/// Audit record for one concretization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub origin: Query,
    pub intent: Option<String>,
    pub associations: Vec<String>,
    pub rewritten: Option<Query>,
    /// Identifiers of the three stage templates, in stage order.
    pub prompts_used: Vec<String>,
    /// Raw model reply per completed stage.
    pub stage_outputs: BTreeMap<String, String>,
    pub status: RewriteStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RewriteStatus {
    Completed,
    Failed { stage: String, error: String },
}

impl RewriteRecord {
    pub fn completed(&self) -> bool {
        self.status == RewriteStatus::Completed
    }
}

/// Value extracted from a stage plus the raw reply it came from.
#[derive(Debug, Clone)]
pub struct StageReply<T> {
    pub value: T,
    pub raw: String,
}

pub struct Concretizer {
    gateway: Arc<Gateway>,
    config: ConcretizerConfig,
    templates: ConcretizerTemplates,
}

impl Concretizer {
    pub fn new(
        gateway: Arc<Gateway>,
        config: ConcretizerConfig,
        templates: ConcretizerTemplates,
    ) -> Self {
        Concretizer {
            gateway,
            config,
            templates,
        }
    }

    pub fn templates(&self) -> &ConcretizerTemplates {
        &self.templates
    }

    /// Stage 1: a single-paragraph statement of the question's intent.
    pub async fn identify_intent(
        &self,
        query: &Query,
    ) -> Result<StageReply<String>, ConcretizeError> {
        if query.source != Source::Origin {
            return Err(ConcretizeError::NotOrigin {
                id: query.id.clone(),
            });
        }
        if query.text.trim().is_empty() {
            return Err(ConcretizeError::EmptyInput { what: "query text" });
        }
        let prompt = self
            .templates
            .intent
            .render(&[("question", query.text.as_str())]);
        let raw = self.run_stage(Stage::Intent, prompt).await?;
        let value = self.parse_answer(Stage::Intent, &raw)?.to_string();
        Ok(StageReply { value, raw })
    }

    /// Stage 2: 1..K short noun phrases associated with the intent,
    /// deduplicated case-insensitively.
    pub async fn associate(
        &self,
        intent: &str,
    ) -> Result<StageReply<Vec<String>>, ConcretizeError> {
        if intent.trim().is_empty() {
            return Err(ConcretizeError::EmptyInput { what: "intent" });
        }
        let k = self.config.max_associations.to_string();
        let prompt = self
            .templates
            .associate
            .render(&[("intent", intent), ("max_associations", k.as_str())]);
        let raw = self.run_stage(Stage::Associate, prompt).await?;
        let answer = self.parse_answer(Stage::Associate, &raw)?;
        let value = parse_associations(answer, self.config.max_associations);
        if value.is_empty() {
            return Err(ConcretizeError::ZeroAssociations { reply: raw });
        }
        Ok(StageReply { value, raw })
    }

    /// Stage 3: the concretized question, linked to its origin.
    pub async fn rewrite(
        &self,
        origin: &Query,
        intent: &str,
        associations: &[String],
    ) -> Result<StageReply<Query>, ConcretizeError> {
        if intent.trim().is_empty() {
            return Err(ConcretizeError::EmptyInput { what: "intent" });
        }
        if associations.is_empty() {
            return Err(ConcretizeError::EmptyInput {
                what: "associations",
            });
        }
        let joined = associations.join("; ");
        let prompt = self.templates.rewrite.render(&[
            ("question", origin.text.as_str()),
            ("intent", intent),
            ("associations", joined.as_str()),
        ]);
        let raw = self.run_stage(Stage::Rewrite, prompt).await?;
        let text = self.parse_answer(Stage::Rewrite, &raw)?.to_string();
        if text.trim() == origin.text.trim() {
            return Err(ConcretizeError::IdenticalRewrite);
        }
        let rewritten = Query::rewrite_of(origin, format!("{}.rw", origin.id), text)?;
        Ok(StageReply {
            value: rewritten,
            raw,
        })
    }

    /// Runs all three stages. Stage failures come back as a record marked
    /// failed at the offending stage, with every completed intermediate kept;
    /// only precondition violations are hard errors.
    pub async fn concretize(&self, query: &Query) -> Result<RewriteRecord, ConcretizeError> {
        if query.source != Source::Origin {
            return Err(ConcretizeError::NotOrigin {
                id: query.id.clone(),
            });
        }
        query.validate()?;

        let mut record = RewriteRecord {
            origin: query.clone(),
            intent: None,
            associations: Vec::new(),
            rewritten: None,
            prompts_used: self.templates.ids(),
            stage_outputs: BTreeMap::new(),
            status: RewriteStatus::Completed,
        };

        // Failures are attributed to the stage being run, not parsed out of
        // the error (a gateway error carries no stage of its own).
        let fail = |mut record: RewriteRecord, stage: Stage, err: ConcretizeError| {
            record.status = RewriteStatus::Failed {
                stage: stage.as_str().to_string(),
                error: err.to_string(),
            };
            Ok(record)
        };

        let intent = match self.identify_intent(query).await {
            Ok(reply) => {
                record
                    .stage_outputs
                    .insert(Stage::Intent.as_str().to_string(), reply.raw.clone());
                record.intent = Some(reply.value.clone());
                reply.value
            }
            Err(err) => return fail(record, Stage::Intent, err),
        };

        let associations = match self.associate(&intent).await {
            Ok(reply) => {
                record
                    .stage_outputs
                    .insert(Stage::Associate.as_str().to_string(), reply.raw.clone());
                record.associations = reply.value.clone();
                reply.value
            }
            Err(err) => return fail(record, Stage::Associate, err),
        };

        match self.rewrite(query, &intent, &associations).await {
            Ok(reply) => {
                record
                    .stage_outputs
                    .insert(Stage::Rewrite.as_str().to_string(), reply.raw.clone());
                record.rewritten = Some(reply.value);
            }
            Err(err) => return fail(record, Stage::Rewrite, err),
        }

        Ok(record)
    }

    /// Concretizes a batch, one record per query in input order. Stages
    /// within one query run sequentially; queries run in parallel up to
    /// `parallelism`.
    pub async fn concretize_batch(
        &self,
        queries: &[Query],
        parallelism: usize,
    ) -> Result<Vec<RewriteRecord>, ConcretizeError> {
        use futures::StreamExt;
        if queries.is_empty() {
            return Err(ConcretizeError::EmptyInput { what: "query batch" });
        }
        for q in queries {
            if q.source != Source::Origin {
                return Err(ConcretizeError::NotOrigin { id: q.id.clone() });
            }
            q.validate()?;
        }
        let records: Vec<Result<RewriteRecord, ConcretizeError>> =
            futures::stream::iter(queries.iter().map(|q| self.concretize(q)))
                .buffered(parallelism.max(1))
                .collect()
                .await;
        records.into_iter().collect()
    }

    async fn run_stage(&self, stage: Stage, prompt: String) -> Result<String, ConcretizeError> {
        let exchange = self.stage_exchange(prompt)?;
        let raw = self.gateway.complete(&exchange).await?;
        if let Some(_pattern) = self.matched_refusal(&raw) {
            return Err(ConcretizeError::StageRefusal { stage, reply: raw });
        }
        Ok(raw)
    }

    fn stage_exchange(&self, prompt: String) -> Result<ChatExchange, GatewayError> {
        ChatExchange::new(
            PurposeTag::Rewrite,
            &self.config.model,
            vec![ChatMessage::user(prompt)],
        )?
        .with_temperature(self.config.temperature)?
        .with_max_tokens(self.config.max_tokens)
    }

    fn matched_refusal(&self, reply: &str) -> Option<&str> {
        let lower = reply.to_lowercase();
        self.config
            .refusal_patterns
            .iter()
            .find(|p| !p.is_empty() && lower.contains(&p.to_lowercase()))
            .map(String::as_str)
    }

    fn parse_answer<'r>(&self, stage: Stage, reply: &'r str) -> Result<&'r str, ConcretizeError> {
        parse_answer_line(reply).ok_or_else(|| ConcretizeError::Unparseable {
            stage,
            reply: reply.to_string(),
        })
    }
}

/// Extracts the content of the last `ANSWER:` line, if any.
pub fn parse_answer_line(reply: &str) -> Option<&str> {
    reply
        .lines()
        .rev()
        .find_map(|line| line.trim().strip_prefix(ANSWER_DELIMITER))
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// Splits an answer into items, deduplicates case-insensitively (first
/// occurrence wins), and keeps at most `k`.
fn parse_associations(answer: &str, k: usize) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut items = Vec::new();
    for item in answer.split([';', ',']) {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        if seen.insert(item.to_lowercase()) {
            items.push(item.to_string());
        }
        if items.len() == k {
            break;
        }
    }
    items
}
