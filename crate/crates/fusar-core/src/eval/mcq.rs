//! Multiple-choice scoring with a deterministic extraction precedence.
//!
//! The predicted label is read from the response phase only, never from the
//! reasoning. Precedence: (1) an "answer is X" / "Answer: X" pattern,
//! (2) a line holding nothing but a choice label, (3) the last standalone
//! choice-label token. No match means abstain, which scores as incorrect.
//! Every result records which rule fired in `extraction_note`.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use super::EvalError;
use crate::trace::ModelOutput;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqChoice {
    pub label: String,
    pub text: String,
}

/// One item in ARC-compatible shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<McqChoice>,
    #[serde(rename = "answerKey")]
    pub answer_key: String,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |message: String| EvalError::BadItem {
            id: self.id.clone(),
            message,
        };
        if self.choices.len() < 2 {
            return Err(bad("needs at least two choices".to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for choice in &self.choices {
            if choice.label.trim().is_empty() {
                return Err(bad("empty choice label".to_string()));
            }
            if !seen.insert(choice.label.to_lowercase()) {
                return Err(bad(format!("duplicate choice label `{}`", choice.label)));
            }
        }
        if self.normalize_label(&self.answer_key).is_none() {
            return Err(bad(format!(
                "answerKey `{}` is not a choice label",
                self.answer_key
            )));
        }
        Ok(())
    }

    /// Maps a candidate onto the item's label casing, case-insensitively.
    fn normalize_label(&self, candidate: &str) -> Option<&str> {
        self.choices
            .iter()
            .find(|c| c.label.eq_ignore_ascii_case(candidate))
            .map(|c| c.label.as_str())
    }

    /// "A. first\nB. second" rendering for prompts.
    pub fn render_choices(&self) -> String {
        self.choices
            .iter()
            .map(|c| format!("{}. {}", c.label, c.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqResult {
    pub id: String,
    /// `None` is an abstain.
    pub predicted: Option<String>,
    pub correct: bool,
    pub extraction_note: String,
}

fn answer_patterns() -> &'static [Regex; 2] {
    static PATTERNS: OnceLock<[Regex; 2]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            Regex::new(r"(?i)\banswer\s+is\s*[:\-]?\s*\(?([A-Za-z0-9])\)?").unwrap(),
            Regex::new(r"(?i)\banswer\s*:\s*\(?([A-Za-z0-9])\)?").unwrap(),
        ]
    })
}

/// Scores one item against a model output.
pub fn score_mcq(item: &McqItem, output: &ModelOutput) -> Result<McqResult, EvalError> {
    item.validate()?;
    let response = output.response.as_str();
    let (predicted, extraction_note) = extract_label(item, response);
    let gold = item
        .normalize_label(&item.answer_key)
        .expect("validated answer key");
    let correct = predicted.as_deref() == Some(gold);
    Ok(McqResult {
        id: item.id.clone(),
        predicted,
        correct,
        extraction_note,
    })
}

fn extract_label(item: &McqItem, response: &str) -> (Option<String>, String) {
    // Rule 1: explicit "answer is X" / "Answer: X"; last valid match wins.
    let mut rule1: Option<(usize, String, String)> = None;
    for re in answer_patterns() {
        for caps in re.captures_iter(response) {
            let m = caps.get(0).expect("match");
            let candidate = caps.get(1).expect("capture").as_str();
            if let Some(label) = item.normalize_label(candidate) {
                let better = rule1
                    .as_ref()
                    .map(|(start, _, _)| m.start() >= *start)
                    .unwrap_or(true);
                if better {
                    rule1 = Some((m.start(), label.to_string(), m.as_str().to_string()));
                }
            }
        }
    }
    if let Some((_, label, matched)) = rule1 {
        return (Some(label), format!("rule1: matched {matched:?}"));
    }

    // Rule 2: a line that is nothing but a label (optionally "B." or "(B)").
    let mut rule2: Option<String> = None;
    for line in response.lines() {
        let line = line.trim();
        let stripped = line
            .strip_suffix('.')
            .or_else(|| {
                line.strip_prefix('(')
                    .and_then(|rest| rest.strip_suffix(')'))
            })
            .unwrap_or(line);
        if let Some(label) = item.normalize_label(stripped) {
            rule2 = Some(label.to_string());
        }
    }
    if let Some(label) = rule2 {
        let note = format!("rule2: lone label line {label:?}");
        return (Some(label), note);
    }

    // Rule 3: last standalone label token, case-sensitive so that the
    // article "a" never reads as choice A.
    let mut rule3: Option<&str> = None;
    for token in response.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        if let Some(choice) = item.choices.iter().find(|c| c.label == token) {
            rule3 = Some(choice.label.as_str());
        }
    }
    if let Some(label) = rule3 {
        return (
            Some(label.to_string()),
            format!("rule3: last standalone token {label:?}"),
        );
    }

    (None, "abstain: no label found".to_string())
}
