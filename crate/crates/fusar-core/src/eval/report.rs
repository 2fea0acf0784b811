//! ASR tables and deterministic report rendering.
//!
//! Aggregation stays exact: percentages are rational numbers over verdict
//! counts, rounded half-up to two decimals only when printed.

use serde::{Deserialize, Serialize};

use super::{EvalError, Phase};
use crate::trace::Source;

/// An exact percentage: `100 * numer / denom`, with half-up display
/// rounding (away from zero for negative deltas).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pct {
    numer: i128,
    denom: i128,
}

impl Pct {
    pub fn from_counts(part: u64, total: u64) -> Pct {
        assert!(total > 0, "percentage needs a positive denominator");
        Pct {
            numer: part as i128,
            denom: total as i128,
        }
    }

    pub fn diff(a: Pct, b: Pct) -> Pct {
        Pct {
            numer: a.numer * b.denom - b.numer * a.denom,
            denom: a.denom * b.denom,
        }
    }

    /// The percentage in hundredths (e.g. 27.69% -> 2769), half-up.
    pub fn hundredths(&self) -> i128 {
        let negative = (self.numer < 0) != (self.denom < 0);
        let n = self.numer.unsigned_abs();
        let d = self.denom.unsigned_abs();
        let rounded = (2 * n * 10_000 + d) / (2 * d);
        if negative {
            -(rounded as i128)
        } else {
            rounded as i128
        }
    }

    pub fn as_f64(&self) -> f64 {
        100.0 * self.numer as f64 / self.denom as f64
    }
}

impl std::fmt::Display for Pct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let h = self.hundredths();
        let sign = if h < 0 { "-" } else { "" };
        let h = h.unsigned_abs();
        write!(f, "{sign}{}.{:02}", h / 100, h % 100)
    }
}

/// One ASR cell: a model × dataset × phase count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRow {
    pub model: String,
    pub dataset: Source,
    pub phase: Phase,
    pub unsafe_count: u64,
    pub total: u64,
    /// Raw ratio, kept for downstream arithmetic; display goes through
    /// [`AsrRow::pct`].
    pub asr: f64,
}

impl AsrRow {
    pub fn pct(&self) -> Pct {
        Pct::from_counts(self.unsafe_count, self.total)
    }
}

/// Rewrite-minus-origin ASR. Rows must describe the same model and phase.
pub fn delta(rewrite: &AsrRow, origin: &AsrRow) -> Result<Pct, EvalError> {
    if rewrite.model != origin.model || rewrite.phase != origin.phase {
        return Err(EvalError::MismatchedRows {
            message: format!(
                "delta needs matching model and phase, got {}/{:?} vs {}/{:?}",
                rewrite.model, rewrite.phase, origin.model, origin.phase
            ),
        });
    }
    Ok(Pct::diff(rewrite.pct(), origin.pct()))
}

/// The four cells of one model's phase-split safety evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrTable {
    pub model: String,
    pub reasoning_origin: AsrRow,
    pub reasoning_rewrite: AsrRow,
    pub response_origin: AsrRow,
    pub response_rewrite: AsrRow,
}

impl AsrTable {
    pub fn reasoning_delta(&self) -> Result<Pct, EvalError> {
        delta(&self.reasoning_rewrite, &self.reasoning_origin)
    }

    pub fn response_delta(&self) -> Result<Pct, EvalError> {
        delta(&self.response_rewrite, &self.response_origin)
    }
}

/// Multiple-choice accuracy counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McqSummary {
    pub model: String,
    pub correct: u64,
    pub total: u64,
    pub abstained: u64,
}

impl McqSummary {
    pub fn accuracy(&self) -> Pct {
        Pct::from_counts(self.correct, self.total)
    }
}

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

pub const ASR_CSV_HEADER: &str = "model,dataset,phase,unsafe,total,asr,delta";

/// CSV with one row per cell; the delta column is filled on rewrite rows.
pub fn render_asr_csv(tables: &[AsrTable]) -> Result<String, EvalError> {
    let mut out = String::new();
    out.push_str(ASR_CSV_HEADER);
    out.push('\n');
    for table in tables {
        let rows = [
            (&table.reasoning_origin, None),
            (&table.reasoning_rewrite, Some(table.reasoning_delta()?)),
            (&table.response_origin, None),
            (&table.response_rewrite, Some(table.response_delta()?)),
        ];
        for (row, delta) in rows {
            let delta = delta.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&row.model),
                row.dataset,
                row.phase,
                row.unsafe_count,
                row.total,
                row.pct(),
                delta
            ));
        }
    }
    Ok(out)
}

/// Markdown table: one row per model, origin/rewrite/Δ per phase.
pub fn render_asr_markdown(tables: &[AsrTable]) -> Result<String, EvalError> {
    let mut out = String::new();
    out.push_str("# Safety evaluation (ASR)\n\n");
    out.push_str(
        "| Model | Reasoning Origin | Reasoning Rewrite | Reasoning Δ | \
         Response Origin | Response Rewrite | Response Δ |\n",
    );
    out.push_str("|---|---|---|---|---|---|---|\n");
    for table in tables {
        out.push_str(&format!(
            "| {} | {}% | {}% | {}% | {}% | {}% | {}% |\n",
            table.model,
            table.reasoning_origin.pct(),
            table.reasoning_rewrite.pct(),
            table.reasoning_delta()?,
            table.response_origin.pct(),
            table.response_rewrite.pct(),
            table.response_delta()?,
        ));
    }
    Ok(out)
}

pub const MCQ_CSV_HEADER: &str = "model,correct,total,abstained,accuracy";

pub fn render_mcq_csv(summaries: &[McqSummary]) -> String {
    let mut out = String::new();
    out.push_str(MCQ_CSV_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&s.model),
            s.correct,
            s.total,
            s.abstained,
            s.accuracy()
        ));
    }
    out
}

pub fn render_mcq_markdown(summaries: &[McqSummary]) -> String {
    let mut out = String::new();
    out.push_str("# Reasoning evaluation (multiple choice)\n\n");
    out.push_str("| Model | Correct | Total | Abstained | Accuracy |\n");
    out.push_str("|---|---|---|---|---|\n");
    for s in summaries {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {}% |\n",
            s.model,
            s.correct,
            s.total,
            s.abstained,
            s.accuracy()
        ));
    }
    out
}
