//! Deterministic leak scanners: quantity-with-unit patterns and blacklist
//! terms. Pure and idempotent; the precision-first layer under the LLM
//! judge.

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::FuzzError;

/// One flagged span with the term or unit that triggered it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakFinding {
    pub start: usize,
    pub end: usize,
    /// The matched text.
    pub span: String,
    /// The unit-table entry or blacklist term behind the match.
    pub term: String,
}

/// Flags numbers adjacent to a unit from the unit table ("450°C", "30 mL",
/// "2 hours"). Bare numerals without units (step indices, list numbering)
/// are not leaks.
#[derive(Debug, Clone)]
pub struct NumericScanner {
    patterns: Vec<(String, Regex)>,
}

impl NumericScanner {
    pub fn new(units: &[String]) -> Result<Self, FuzzError> {
        let mut patterns = Vec::with_capacity(units.len());
        for unit in units {
            let unit = unit.trim();
            if unit.is_empty() {
                continue;
            }
            let escaped = regex::escape(unit);
            // Multi-character alphabetic units match case-insensitively;
            // single-character units ("g" vs "G") stay exact.
            let insensitive = unit.chars().count() > 1 && unit.chars().any(|c| c.is_alphabetic());
            let mut pattern = String::new();
            if insensitive {
                pattern.push_str("(?i)");
            }
            pattern.push_str(r"\d+(?:[.,]\d+)?\s*");
            pattern.push_str(&escaped);
            let re = Regex::new(&pattern).map_err(|source| FuzzError::BadTerm {
                term: unit.to_string(),
                message: source.to_string(),
            })?;
            patterns.push((unit.to_string(), re));
        }
        if patterns.is_empty() {
            return Err(FuzzError::EmptyTermList { what: "unit table" });
        }
        Ok(NumericScanner { patterns })
    }

    pub fn scan(&self, text: &str) -> Vec<LeakFinding> {
        let bytes = text.as_bytes();
        let mut findings = Vec::new();
        for (unit, re) in &self.patterns {
            let unit_tail_is_word = unit
                .chars()
                .last()
                .map(|c| c.is_alphanumeric())
                .unwrap_or(false);
            for m in re.find_iter(text) {
                // The regex crate has no look-around: enforce the boundaries
                // manually. Reject digits glued to a preceding word ("v2.5g"
                // is a version tag) and units followed by more word
                // characters ("5 grand" is not "5 g").
                if m.start() > 0 {
                    let before = last_char_before(text, bytes, m.start());
                    if before.is_alphanumeric() {
                        continue;
                    }
                }
                if unit_tail_is_word {
                    let after = text[m.end()..].chars().next();
                    if after.map(|c| c.is_alphanumeric()).unwrap_or(false) {
                        continue;
                    }
                }
                findings.push(LeakFinding {
                    start: m.start(),
                    end: m.end(),
                    span: m.as_str().to_string(),
                    term: unit.clone(),
                });
            }
        }
        dedupe_overlaps(findings)
    }
}

/// Flags case-insensitive whole-word occurrences of blacklist terms.
/// Multi-word terms match across any run of whitespace.
#[derive(Debug, Clone)]
pub struct EntityScanner {
    patterns: Vec<(String, Regex)>,
}

impl EntityScanner {
    pub fn new(terms: &[String]) -> Result<Self, FuzzError> {
        let mut patterns = Vec::with_capacity(terms.len());
        for term in terms {
            let term = term.trim();
            if term.is_empty() {
                continue;
            }
            let words: Vec<String> = term.split_whitespace().map(regex::escape).collect();
            let pattern = format!(r"(?i)\b{}\b", words.join(r"\s+"));
            let re = Regex::new(&pattern).map_err(|source| FuzzError::BadTerm {
                term: term.to_string(),
                message: source.to_string(),
            })?;
            patterns.push((term.to_string(), re));
        }
        if patterns.is_empty() {
            return Err(FuzzError::EmptyTermList { what: "blacklist" });
        }
        Ok(EntityScanner { patterns })
    }

    pub fn scan(&self, text: &str) -> Vec<LeakFinding> {
        let mut findings = Vec::new();
        for (term, re) in &self.patterns {
            for m in re.find_iter(text) {
                findings.push(LeakFinding {
                    start: m.start(),
                    end: m.end(),
                    span: m.as_str().to_string(),
                    term: term.clone(),
                });
            }
        }
        dedupe_overlaps(findings)
    }

    /// Distinct blacklist terms present in the text, in list order.
    pub fn terms_in(&self, text: &str) -> Vec<String> {
        self.patterns
            .iter()
            .filter(|(_, re)| re.is_match(text))
            .map(|(term, _)| term.clone())
            .collect()
    }
}

fn last_char_before(text: &str, bytes: &[u8], pos: usize) -> char {
    let mut i = pos - 1;
    while i > 0 && (bytes[i] & 0b1100_0000) == 0b1000_0000 {
        i -= 1;
    }
    text[i..].chars().next().unwrap_or(' ')
}

/// Sorts findings and keeps the longest match at each position: a span fully
/// contained in an already-kept span is dropped ("450 g" also matching unit
/// "g" reports once).
fn dedupe_overlaps(mut findings: Vec<LeakFinding>) -> Vec<LeakFinding> {
    findings.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    let mut kept: Vec<LeakFinding> = Vec::with_capacity(findings.len());
    for f in findings {
        if kept
            .last()
            .map(|k| f.start >= k.start && f.end <= k.end)
            .unwrap_or(false)
        {
            continue;
        }
        kept.push(f);
    }
    kept
}

pub const DEFAULT_UNITS: &[&str] = &[
    "°C", "°F", "g", "kg", "mg", "mL", "ml", "L", "%", "ppm", "hours", "hour", "minutes",
    "minute", "seconds", "psi", "V", "bar", "atm",
];
