//! Content-addressed fixture store: one JSON file per cache key.
//!
//! Layout: `{root}/{purpose}/{key}.json` holding the full request, the
//! response text, and a record timestamp. Files are written via a temp file
//! plus rename, so concurrent writers of the same key cannot tear each other.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ChatExchange, GatewayError, PurposeTag};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub request: ChatExchange,
    pub response: String,
    pub timestamp: String,
}

#[derive(Debug, Clone)]
pub struct FixtureStore {
    root: PathBuf,
}

impl FixtureStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, purpose: PurposeTag, key: &str) -> PathBuf {
        self.root.join(purpose.as_str()).join(format!("{key}.json"))
    }

    pub fn contains(&self, purpose: PurposeTag, key: &str) -> bool {
        self.path_for(purpose, key).is_file()
    }

    /// Returns the stored response for a key, or `None` when absent.
    pub fn load(&self, purpose: PurposeTag, key: &str) -> Result<Option<String>, GatewayError> {
        let path = self.path_for(purpose, key);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(GatewayError::Fixture {
                    path,
                    message: e.to_string(),
                })
            }
        };
        let record: FixtureRecord =
            serde_json::from_str(&text).map_err(|e| GatewayError::Fixture {
                path,
                message: e.to_string(),
            })?;
        Ok(Some(record.response))
    }

    /// Persists a (key -> response) entry atomically.
    pub fn store(
        &self,
        exchange: &ChatExchange,
        key: &str,
        response: &str,
    ) -> Result<(), GatewayError> {
        let path = self.path_for(exchange.purpose, key);
        let dir = path.parent().expect("fixture path has a parent");
        let fixture_err = |message: String| GatewayError::Fixture {
            path: path.clone(),
            message,
        };
        fs::create_dir_all(dir).map_err(|e| fixture_err(e.to_string()))?;
        let record = FixtureRecord {
            request: exchange.clone(),
            response: response.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let json = serde_json::to_string_pretty(&record).expect("record serializes");
        let mut tmp =
            tempfile::NamedTempFile::new_in(dir).map_err(|e| fixture_err(e.to_string()))?;
        tmp.write_all(json.as_bytes())
            .map_err(|e| fixture_err(e.to_string()))?;
        tmp.persist(&path).map_err(|e| fixture_err(e.to_string()))?;
        Ok(())
    }
}
