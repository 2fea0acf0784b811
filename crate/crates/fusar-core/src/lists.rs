//! Term-list files: one term per line, `#` starts a comment.
//!
//! Used for the entity blacklist, the quantity unit table, the conjunction
//! lexicon, and refusal marker lists.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ListError {
    #[error("term list {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("term list {path} contains no terms")]
    Empty { path: PathBuf },
}

/// Reads a term list, dropping comments, blank lines, and duplicates
/// (first occurrence wins, order preserved).
pub fn load_terms(path: &Path) -> Result<Vec<String>, ListError> {
    let text = fs::read_to_string(path).map_err(|source| ListError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let terms = parse_terms(&text);
    if terms.is_empty() {
        return Err(ListError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(terms)
}

pub fn parse_terms(text: &str) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut terms = Vec::new();
    for line in text.lines() {
        let term = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        }
        .trim();
        if term.is_empty() {
            continue;
        }
        if seen.insert(term.to_lowercase()) {
            terms.push(term.to_string());
        }
    }
    terms
}
