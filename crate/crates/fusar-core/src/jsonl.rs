//! JSONL reading and writing with an optional leading meta line.
//!
//! Internal pipeline artifacts start with one meta object
//! (`{"record_type":"meta","config_hash":...}`) that stamps the run's config
//! hash into the file; readers here skip it. Files are UTF-8 with `\n` line
//! endings and no BOM.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
}

/// Leading provenance line for internal artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaLine {
    pub record_type: String,
    pub config_hash: String,
}

impl MetaLine {
    pub fn new(config_hash: impl Into<String>) -> Self {
        MetaLine {
            record_type: "meta".to_string(),
            config_hash: config_hash.into(),
        }
    }
}

fn is_meta(value: &serde_json::Value) -> bool {
    value.get("record_type").and_then(|v| v.as_str()) == Some("meta")
}

/// Reads all non-meta records from a JSONL file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|source| JsonlError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
        if is_meta(&value) {
            continue;
        }
        let item = serde_json::from_value(value).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Reads the config hash from a file's meta line, if present.
pub fn read_meta(path: &Path) -> Result<Option<MetaLine>, JsonlError> {
    let text = fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match text.lines().next() {
        Some(first) if !first.trim().is_empty() => {
            Ok(serde_json::from_str::<MetaLine>(first).ok().filter(|m| m.record_type == "meta"))
        }
        _ => Ok(None),
    }
}

/// Writes records as JSONL, prefixed by `meta` when given.
pub fn write_jsonl<T: Serialize>(
    path: &Path,
    meta: Option<&MetaLine>,
    items: &[T],
) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut buf = Vec::new();
    if let Some(meta) = meta {
        serde_json::to_writer(&mut buf, meta).expect("meta serializes");
        buf.push(b'\n');
    }
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes");
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}
