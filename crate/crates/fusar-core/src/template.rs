//! Plain-text prompt templates with `{placeholder}` substitution.
//!
//! Templates are ordinary text files in a config directory. A template's
//! identifier is its file stem plus a short content hash, so every record
//! that names the templates it used pins the exact wording.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("template `{id}` is empty")]
    Empty { id: String },
}

#[derive(Debug, Clone)]
pub struct Template {
    id: String,
    text: String,
}

impl Template {
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "template".to_string());
        Self::from_text(&stem, text)
    }

    pub fn from_text(stem: &str, text: String) -> Result<Self, TemplateError> {
        if text.trim().is_empty() {
            return Err(TemplateError::Empty {
                id: stem.to_string(),
            });
        }
        let digest = Sha256::digest(text.as_bytes());
        let id = format!("{stem}@{}", hex::encode(&digest[..4]));
        Ok(Template { id, text })
    }

    /// Stable identifier: `stem@xxxxxxxx` where the hex digits hash the text.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Replaces every `{name}` with its value. Unknown placeholders are left
    /// verbatim so a malformed template is visible in the recorded prompt.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.text.clone();
        for (name, value) in vars {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }
}

/// Loads `<dir>/<stem>.txt`.
pub fn load_template(dir: &Path, stem: &str) -> Result<Template, TemplateError> {
    Template::load(&dir.join(format!("{stem}.txt")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_replaces_placeholders() {
        let t = Template::from_text("x", "Q: {question}\nK: {k}".to_string()).unwrap();
        assert_eq!(t.render(&[("question", "why"), ("k", "5")]), "Q: why\nK: 5");
    }

    #[test]
    fn id_tracks_content() {
        let a = Template::from_text("x", "one".to_string()).unwrap();
        let b = Template::from_text("x", "two".to_string()).unwrap();
        assert_ne!(a.id(), b.id());
        assert!(a.id().starts_with("x@"));
    }

    #[test]
    fn empty_template_rejected() {
        assert!(Template::from_text("x", "  \n".to_string()).is_err());
    }
}
