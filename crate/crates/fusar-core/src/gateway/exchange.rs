//! Chat exchange types and the content-addressed cache key.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// What a call is for. Routes endpoint selection, default sampling, and the
/// fixture subdirectory.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum PurposeTag {
    /// The model under evaluation.
    Target,
    /// Concretization rewrite stages.
    Rewrite,
    /// Detoxification transforms.
    Fuzz,
    /// Safety and keep-principle judging.
    Judge,
    /// Safe-refusal generation.
    Reject,
    /// Entity extraction and trace classification.
    Extract,
}

impl PurposeTag {
    pub const ALL: [PurposeTag; 6] = [
        PurposeTag::Target,
        PurposeTag::Rewrite,
        PurposeTag::Fuzz,
        PurposeTag::Judge,
        PurposeTag::Reject,
        PurposeTag::Extract,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PurposeTag::Target => "target",
            PurposeTag::Rewrite => "rewrite",
            PurposeTag::Fuzz => "fuzz",
            PurposeTag::Judge => "judge",
            PurposeTag::Reject => "reject",
            PurposeTag::Extract => "extract",
        }
    }

    /// Judging, extraction, and reject generation default to greedy
    /// sampling; the creative transforms default to a mild temperature.
    pub fn default_temperature(&self) -> f64 {
        match self {
            PurposeTag::Judge | PurposeTag::Extract | PurposeTag::Reject | PurposeTag::Target => {
                0.0
            }
            PurposeTag::Rewrite | PurposeTag::Fuzz => 0.7,
        }
    }
}

impl std::fmt::Display for PurposeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PurposeTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PurposeTag::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown purpose tag `{s}`"))
    }
}

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

/// One chat-completion call: messages plus sampling parameters.
///
/// Identical exchanges always hash to the same cache key; the purpose tag is
/// not part of the key (it selects the fixture subdirectory and endpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub purpose: PurposeTag,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub messages: Vec<ChatMessage>,
}

impl ChatExchange {
    pub fn new(
        purpose: PurposeTag,
        model: impl Into<String>,
        messages: Vec<ChatMessage>,
    ) -> Result<Self, GatewayError> {
        let exchange = ChatExchange {
            purpose,
            model: model.into(),
            temperature: purpose.default_temperature(),
            max_tokens: DEFAULT_MAX_TOKENS,
            messages,
        };
        exchange.validate()?;
        Ok(exchange)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, GatewayError> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Result<Self, GatewayError> {
        self.max_tokens = max_tokens;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidExchange(
                "messages must be non-empty".to_string(),
            ));
        }
        if self.messages[0].role == Role::Assistant {
            return Err(GatewayError::InvalidExchange(
                "first message must be system or user".to_string(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidExchange(format!(
                "temperature must be a finite non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidExchange(
                "max_tokens must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Stable content hash over (model, temperature, max_tokens, messages).
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct KeyMaterial<'a> {
            model: &'a str,
            temperature: f64,
            max_tokens: u32,
            messages: &'a [ChatMessage],
        }
        let material = KeyMaterial {
            model: &self.model,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            messages: &self.messages,
        };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
