//! Domain types for reasoning-model output and the deterministic phase parser.
//!
//! A reasoning model's reply is expected to open with a `<think>` block
//! followed by the final answer. [`split_output`] splits a raw reply into the
//! reasoning and response phases without rewriting a single byte; anomalies
//! (missing tag, unclosed block, extra blocks) are encoded in
//! [`ParseStatus`], never raised as errors. [`trace_metrics`] computes the
//! per-trace analytics (length, conjunctions, entities, step markers) used to
//! compare origin and rewritten prompts.

use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatExchange, ChatMessage, Gateway, GatewayError, PurposeTag};
use crate::template::Template;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("query `{id}` has empty text")]
    EmptyQueryText { id: String },
    #[error("rewrite query `{id}` has no parent_id")]
    MissingParent { id: String },
    #[error("rewrite query `{id}` references unknown origin `{parent}`")]
    UnknownParent { id: String, parent: String },
    #[error("reasoning must not be empty for a non-ablation training target")]
    EmptyReasoning,
    #[error("reasoning contains `</think>` and would corrupt the rendered target")]
    ReasoningContainsCloseTag,
    #[error("conjunction lexicon is empty")]
    EmptyLexicon,
    #[error("invalid metric pattern `{pattern}`: {source}")]
    BadPattern {
        pattern: String,
        source: regex::Error,
    },
    #[error("entity extraction reply has no answer line: {reply:?}")]
    UnparseableExtraction { reply: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Whether a query is an original instruction or a concretized rewrite.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Origin,
    Rewrite,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Origin => write!(f, "origin"),
            Source::Rewrite => write!(f, "rewrite"),
        }
    }
}

/// A harmful instruction with provenance.
///
/// Rewrites always point back at the origin query they were derived from via
/// `parent_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Query {
    pub fn origin(
        id: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self, TraceError> {
        let q = Query {
            id: id.into(),
            text: text.into(),
            source: Source::Origin,
            parent_id: None,
            category: None,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn rewrite_of(
        origin: &Query,
        id: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self, TraceError> {
        let q = Query {
            id: id.into(),
            text: text.into(),
            source: Source::Rewrite,
            parent_id: Some(origin.id.clone()),
            category: origin.category.clone(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.text.trim().is_empty() {
            return Err(TraceError::EmptyQueryText {
                id: self.id.clone(),
            });
        }
        if self.source == Source::Rewrite && self.parent_id.is_none() {
            return Err(TraceError::MissingParent {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

/// Checks that every rewrite resolves to exactly one origin in `origins`.
pub fn check_lineage(origins: &[Query], rewrites: &[Query]) -> Result<(), TraceError> {
    let ids: BTreeSet<&str> = origins.iter().map(|q| q.id.as_str()).collect();
    for rw in rewrites {
        rw.validate()?;
        match &rw.parent_id {
            Some(parent) if ids.contains(parent.as_str()) => {}
            Some(parent) => {
                return Err(TraceError::UnknownParent {
                    id: rw.id.clone(),
                    parent: parent.clone(),
                })
            }
            None => {
                return Err(TraceError::MissingParent { id: rw.id.clone() });
            }
        }
    }
    Ok(())
}

/// How the think tags in a raw reply were laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    NoThink,
    UnclosedThink,
    MultipleThink,
}

/// A raw model reply split into its reasoning and response phases.
///
/// `reasoning` and `response` are always verbatim substrings of `raw`; when
/// `parse_status` is [`ParseStatus::Clean`] the raw text reconstructs exactly
/// as `<think>` + reasoning + `</think>` + response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub raw: String,
    pub reasoning: String,
    pub response: String,
    pub parse_status: ParseStatus,
}

/// Splits a raw reply into reasoning and response. Total: never fails.
///
/// A think block is recognized only when the reply opens with `<think>`;
/// anything else is treated as a plain response (the whole text is preserved
/// for judging). An opening tag without a closing tag puts everything after
/// the tag into reasoning. Extra `<think>` tags after the first block are
/// left verbatim in whichever phase they fall into and flagged as
/// [`ParseStatus::MultipleThink`].
pub fn split_output(raw: &str) -> ModelOutput {
    let Some(after_open) = raw.strip_prefix(THINK_OPEN) else {
        return ModelOutput {
            raw: raw.to_string(),
            reasoning: String::new(),
            response: raw.to_string(),
            parse_status: ParseStatus::NoThink,
        };
    };
    let Some(close_at) = after_open.find(THINK_CLOSE) else {
        return ModelOutput {
            raw: raw.to_string(),
            reasoning: after_open.to_string(),
            response: String::new(),
            parse_status: ParseStatus::UnclosedThink,
        };
    };
    let reasoning = &after_open[..close_at];
    let response = &after_open[close_at + THINK_CLOSE.len()..];
    let parse_status = if reasoning.contains(THINK_OPEN) || response.contains(THINK_OPEN) {
        ParseStatus::MultipleThink
    } else {
        ParseStatus::Clean
    };
    ModelOutput {
        raw: raw.to_string(),
        reasoning: reasoning.to_string(),
        response: response.to_string(),
        parse_status,
    }
}

/// Renders a training target: `<think>` + reasoning + `</think>\n` + reject.
///
/// The rendered string always re-parses with [`ParseStatus::Clean`]; the
/// reject text comes back as the response with the renderer's single `\n`
/// separator still at its head.
pub fn render_training_target(reasoning: &str, reject: &str) -> Result<String, TraceError> {
    if reasoning.is_empty() {
        return Err(TraceError::EmptyReasoning);
    }
    if reasoning.contains(THINK_CLOSE) {
        return Err(TraceError::ReasoningContainsCloseTag);
    }
    Ok(format!("{THINK_OPEN}{reasoning}{THINK_CLOSE}\n{reject}"))
}

/// Renders the response-only (ablation) target with an empty think block.
///
/// The think tags are kept so a model trained on this data retains the
/// two-phase output format.
pub fn render_ablation_target(reject: &str) -> String {
    format!("{THINK_OPEN}\n{THINK_CLOSE}\n{reject}")
}

/// How entities are extracted for [`TraceMetrics`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityMode {
    #[default]
    Heuristic,
    Llm,
}

/// Per-trace analytics over the reasoning phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMetrics {
    /// Length of the reasoning text in characters (not tokens).
    pub char_length: usize,
    /// Case-insensitive whole-word matches against the conjunction lexicon.
    pub conjunction_count: usize,
    /// Distinct entities per the selected extraction mode.
    pub entity_count: usize,
    /// Enumeration markers ("1.", "Step 2", "First," ...).
    pub step_count: usize,
    pub entity_mode: EntityMode,
}

impl TraceMetrics {
    pub fn zero(mode: EntityMode) -> Self {
        TraceMetrics {
            char_length: 0,
            conjunction_count: 0,
            entity_count: 0,
            step_count: 0,
            entity_mode: mode,
        }
    }
}

pub const DEFAULT_CONJUNCTIONS: &[&str] = &[
    "and",
    "then",
    "because",
    "so",
    "therefore",
    "next",
    "after",
    "while",
    "since",
];

const DEFAULT_STEP_PATTERNS: &[&str] = &[
    r"(?m)^\s*\d{1,3}\s*[.):]",
    r"(?i)\bstep\s*\d+\b",
    r"(?i)\b(?:first|second|third|fourth|fifth|sixth|seventh|eighth|ninth|tenth|finally|lastly)\s*,",
];

/// Words that do not open an entity when they start a sentence capitalized.
const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "it", "its", "i", "we", "you", "he",
    "she", "they", "if", "in", "on", "at", "for", "to", "of", "but", "and", "or", "so", "as",
    "by", "my", "our", "your", "then", "now", "here", "there", "when", "what", "how", "why",
    "first", "second", "third", "next", "also", "however", "once", "after", "before", "while",
    "since", "step", "note", "overall", "finally", "lastly",
];

/// Compiled configuration for [`trace_metrics`].
#[derive(Debug, Clone)]
pub struct MetricsConfig {
    lexicon: Vec<String>,
    conjunction_re: Regex,
    step_res: Vec<Regex>,
    stopwords: BTreeSet<String>,
}

impl MetricsConfig {
    /// Builds a config from a conjunction lexicon and the default step
    /// patterns and stopwords. The lexicon must be non-empty.
    pub fn new(lexicon: Vec<String>) -> Result<Self, TraceError> {
        Self::with_patterns(
            lexicon,
            DEFAULT_STEP_PATTERNS.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn with_patterns(
        lexicon: Vec<String>,
        step_patterns: Vec<String>,
    ) -> Result<Self, TraceError> {
        let lexicon: Vec<String> = lexicon
            .into_iter()
            .map(|w| w.trim().to_string())
            .filter(|w| !w.is_empty())
            .collect();
        if lexicon.is_empty() {
            return Err(TraceError::EmptyLexicon);
        }
        let alternation = lexicon
            .iter()
            .map(|w| regex::escape(w))
            .collect::<Vec<_>>()
            .join("|");
        let pattern = format!(r"(?i)\b(?:{alternation})\b");
        let conjunction_re = Regex::new(&pattern).map_err(|source| TraceError::BadPattern {
            pattern,
            source,
        })?;
        let mut step_res = Vec::with_capacity(step_patterns.len());
        for pattern in step_patterns {
            step_res.push(Regex::new(&pattern).map_err(|source| TraceError::BadPattern {
                pattern,
                source,
            })?);
        }
        Ok(MetricsConfig {
            lexicon,
            conjunction_re,
            step_res,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn default_lexicon() -> Self {
        Self::new(DEFAULT_CONJUNCTIONS.iter().map(|s| s.to_string()).collect())
            .expect("default lexicon is valid")
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }
}

/// Computes [`TraceMetrics`] with heuristic entity extraction. Pure.
pub fn trace_metrics(reasoning: &str, config: &MetricsConfig) -> TraceMetrics {
    if reasoning.is_empty() {
        return TraceMetrics::zero(EntityMode::Heuristic);
    }
    TraceMetrics {
        char_length: reasoning.chars().count(),
        conjunction_count: config.conjunction_re.find_iter(reasoning).count(),
        entity_count: heuristic_entities(reasoning, &config.stopwords).len(),
        step_count: count_steps(reasoning, &config.step_res),
        entity_mode: EntityMode::Heuristic,
    }
}

/// Computes [`TraceMetrics`] with entity extraction delegated to a model.
///
/// The template receives the reasoning text as `{reasoning}` and must make
/// the model reply with a final `ANSWER:` line of semicolon-separated
/// entities (`ANSWER: none` for an empty set).
pub async fn trace_metrics_llm(
    reasoning: &str,
    config: &MetricsConfig,
    gateway: &Gateway,
    template: &Template,
    model: &str,
) -> Result<TraceMetrics, TraceError> {
    if reasoning.is_empty() {
        return Ok(TraceMetrics::zero(EntityMode::Llm));
    }
    let prompt = template.render(&[("reasoning", reasoning)]);
    let exchange = ChatExchange::new(
        PurposeTag::Extract,
        model,
        vec![ChatMessage::user(prompt)],
    )?;
    let reply = gateway.complete(&exchange).await?;
    let entity_count = parse_extracted_entities(&reply)
        .ok_or_else(|| TraceError::UnparseableExtraction {
            reply: reply.clone(),
        })?
        .len();
    Ok(TraceMetrics {
        char_length: reasoning.chars().count(),
        conjunction_count: config.conjunction_re.find_iter(reasoning).count(),
        entity_count,
        step_count: count_steps(reasoning, &config.step_res),
        entity_mode: EntityMode::Llm,
    })
}

fn parse_extracted_entities(reply: &str) -> Option<Vec<String>> {
    let line = reply
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix("ANSWER:"))?;
    let mut seen = BTreeSet::new();
    let mut entities = Vec::new();
    for item in line.split(';') {
        let item = item.trim();
        if item.is_empty() || item.eq_ignore_ascii_case("none") {
            continue;
        }
        if seen.insert(item.to_lowercase()) {
            entities.push(item.to_string());
        }
    }
    Some(entities)
}

/// Distinct maximal capitalized token runs, skipping sentence-initial
/// stopwords. A crude named-entity stand-in; noisy by design.
pub fn heuristic_entities(text: &str, stopwords: &BTreeSet<String>) -> BTreeSet<String> {
    #[derive(Debug)]
    struct Token<'a> {
        text: &'a str,
        sentence_initial: bool,
        run_break_before: bool,
    }

    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    let mut sentence_start = true;
    let mut pending_break = true;
    while let Some(&(start, c)) = chars.peek() {
        if c.is_alphanumeric() {
            let mut end = start;
            while let Some(&(i, c2)) = chars.peek() {
                if c2.is_alphanumeric() || c2 == '-' || c2 == '\'' {
                    end = i + c2.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            tokens.push(Token {
                text: &text[start..end],
                sentence_initial: sentence_start,
                run_break_before: pending_break,
            });
            sentence_start = false;
            pending_break = false;
        } else {
            if matches!(c, '.' | '!' | '?' | '\n') {
                sentence_start = true;
            }
            // Runs continue only across plain spaces.
            if c != ' ' {
                pending_break = true;
            }
            chars.next();
        }
    }

    let mut entities = BTreeSet::new();
    let mut run: Vec<&str> = Vec::new();
    let flush = |run: &mut Vec<&str>, entities: &mut BTreeSet<String>| {
        if !run.is_empty() {
            entities.insert(run.join(" "));
            run.clear();
        }
    };
    for token in &tokens {
        let capitalized = token
            .text
            .chars()
            .next()
            .map(|c| c.is_uppercase())
            .unwrap_or(false);
        if token.run_break_before {
            flush(&mut run, &mut entities);
        }
        if !capitalized {
            flush(&mut run, &mut entities);
            continue;
        }
        if run.is_empty()
            && token.sentence_initial
            && stopwords.contains(&token.text.to_lowercase())
        {
            continue;
        }
        run.push(token.text);
    }
    flush(&mut run, &mut entities);
    entities
}

fn count_steps(text: &str, patterns: &[Regex]) -> usize {
    let mut spans: Vec<(usize, usize)> = patterns
        .iter()
        .flat_map(|re| re.find_iter(text).map(|m| (m.start(), m.end())))
        .collect();
    spans.sort_unstable();
    let mut count = 0;
    let mut cursor = 0;
    for (start, end) in spans {
        if start >= cursor {
            count += 1;
            cursor = end;
        }
    }
    count
}
