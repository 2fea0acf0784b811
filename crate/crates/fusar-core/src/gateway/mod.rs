//! Uniform client for OpenAI-compatible chat-completion endpoints.
//!
//! Every model call in the toolkit (targets, rewriters, fuzzifiers, judges,
//! reject generation, extraction) goes through one [`Gateway`], which adds
//! retries, bounded concurrency, and a content-addressed record/replay cache.
//! Replay mode never opens a network connection, which makes full pipeline
//! runs deterministic and offline.

mod exchange;
mod fixtures;

pub use exchange::{ChatExchange, ChatMessage, PurposeTag, Role, DEFAULT_MAX_TOKENS};
pub use fixtures::{FixtureRecord, FixtureStore};

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid exchange: {0}")]
    InvalidExchange(String),
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("network error: {message}")]
    Network { message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed endpoint response: {message}")]
    MalformedResponse { message: String },
    #[error("request failed after {attempts} attempts: {source}")]
    RetriesExhausted {
        attempts: u32,
        source: Box<GatewayError>,
    },
    #[error("replay miss: no fixture for purpose `{purpose}` key {key}")]
    ReplayMiss { purpose: PurposeTag, key: String },
    #[error("fixture store error at {path}: {message}")]
    Fixture { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

impl std::fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GatewayMode::Live => "live",
            GatewayMode::Record => "record",
            GatewayMode::Replay => "replay",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            other => Err(format!("unknown mode `{other}` (live|record|replay)")),
        }
    }
}

/// Attempt budget and backoff schedule. `max_attempts` counts requests, so a
/// permanently failing endpoint sees exactly `max_attempts` of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: vec![250, 1_000, 4_000],
        }
    }
}

impl RetryPolicy {
    fn backoff_after(&self, attempt: u32) -> Duration {
        if self.backoff_ms.is_empty() {
            return Duration::from_millis(0);
        }
        let idx = (attempt as usize).saturating_sub(1).min(self.backoff_ms.len() - 1);
        Duration::from_millis(self.backoff_ms[idx])
    }
}

pub const DEFAULT_API_KEY_ENV: &str = "FUSAR_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub base_url: String,
    /// Per-purpose endpoint overrides (e.g. a separate judge deployment).
    #[serde(default)]
    pub purpose_base_urls: BTreeMap<PurposeTag, String>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    #[serde(default)]
    pub purpose_api_key_envs: BTreeMap<PurposeTag, String>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub mode: GatewayMode,
    pub fixtures_dir: PathBuf,
    #[serde(default = "default_request_timeout_ms")]
    pub request_timeout_ms: u64,
}

fn default_request_timeout_ms() -> u64 {
    120_000
}

impl GatewayConfig {
    pub fn offline(mode: GatewayMode, fixtures_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            base_url: String::new(),
            purpose_base_urls: BTreeMap::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            purpose_api_key_envs: BTreeMap::new(),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            mode,
            fixtures_dir: fixtures_dir.into(),
            request_timeout_ms: default_request_timeout_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidConfig(
                "max_in_flight must be positive".to_string(),
            ));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::InvalidConfig(
                "retry.max_attempts must be positive".to_string(),
            ));
        }
        match self.mode {
            GatewayMode::Replay => {
                if !self.fixtures_dir.is_dir() {
                    return Err(GatewayError::InvalidConfig(format!(
                        "replay mode needs an existing fixtures dir, {} is missing",
                        self.fixtures_dir.display()
                    )));
                }
            }
            GatewayMode::Live | GatewayMode::Record => {
                if self.base_url.trim().is_empty() && self.purpose_base_urls.is_empty() {
                    return Err(GatewayError::InvalidConfig(
                        "live/record mode needs a base_url".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn base_url_for(&self, purpose: PurposeTag) -> &str {
        self.purpose_base_urls
            .get(&purpose)
            .map(String::as_str)
            .unwrap_or(self.base_url.as_str())
    }

    /// Reads the bearer token from the configured environment variable;
    /// absent/empty means the request is sent unauthenticated.
    pub fn api_key_for(&self, purpose: PurposeTag) -> Option<String> {
        let name = self
            .purpose_api_key_envs
            .get(&purpose)
            .map(String::as_str)
            .unwrap_or(self.api_key_env.as_str());
        std::env::var(name).ok().filter(|v| !v.is_empty())
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    content: Option<String>,
}

/// Shared chat-completion client. Safe for concurrent use from many workers.
#[derive(Debug)]
pub struct Gateway {
    config: GatewayConfig,
    // No client is ever built in replay mode.
    client: Option<reqwest::Client>,
    fixtures: FixtureStore,
    limiter: Arc<tokio::sync::Semaphore>,
    in_flight: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = match config.mode {
            GatewayMode::Replay => None,
            GatewayMode::Live | GatewayMode::Record => Some(
                reqwest::Client::builder()
                    .timeout(Duration::from_millis(config.request_timeout_ms))
                    .build()
                    .map_err(|e| GatewayError::Network {
                        message: e.to_string(),
                    })?,
            ),
        };
        let fixtures = FixtureStore::new(config.fixtures_dir.clone());
        let limiter = Arc::new(tokio::sync::Semaphore::new(config.max_in_flight));
        Ok(Gateway {
            config,
            client,
            fixtures,
            limiter,
            in_flight: Mutex::new(HashMap::new()),
        })
    }

    pub fn mode(&self) -> GatewayMode {
        self.config.mode
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn fixtures(&self) -> &FixtureStore {
        &self.fixtures
    }

    /// Completes one exchange and returns the assistant text.
    ///
    /// Replay returns the stored response byte-exactly or fails with a
    /// replay miss. Record consults the cache first (a resumed run repeats
    /// no network calls), fetches on a miss, and persists atomically; one
    /// network call per distinct key even under concurrency. Live always
    /// fetches.
    pub async fn complete(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        exchange.validate()?;
        let key = exchange.cache_key();
        match self.config.mode {
            GatewayMode::Replay => self
                .fixtures
                .load(exchange.purpose, &key)?
                .ok_or(GatewayError::ReplayMiss {
                    purpose: exchange.purpose,
                    key,
                }),
            GatewayMode::Record => {
                if let Some(cached) = self.fixtures.load(exchange.purpose, &key)? {
                    return Ok(cached);
                }
                let lock = self.key_lock(&key);
                let _guard = lock.lock().await;
                if let Some(cached) = self.fixtures.load(exchange.purpose, &key)? {
                    return Ok(cached);
                }
                let response = self.fetch_with_retries(exchange).await?;
                self.fixtures.store(exchange, &key, &response)?;
                self.release_key_lock(&key);
                Ok(response)
            }
            GatewayMode::Live => self.fetch_with_retries(exchange).await,
        }
    }

    /// Completes a batch with positionally aligned per-item results. At most
    /// `max_in_flight` requests are outstanding at any moment.
    pub async fn complete_batch(
        &self,
        exchanges: &[ChatExchange],
    ) -> Result<Vec<Result<String, GatewayError>>, GatewayError> {
        if exchanges.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        let results =
            futures::future::join_all(exchanges.iter().map(|e| self.complete(e))).await;
        Ok(results)
    }

    fn key_lock(&self, key: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut map = self.in_flight.lock().expect("in-flight map poisoned");
        map.entry(key.to_string())
            .or_insert_with(|| Arc::new(tokio::sync::Mutex::new(())))
            .clone()
    }

    fn release_key_lock(&self, key: &str) {
        let mut map = self.in_flight.lock().expect("in-flight map poisoned");
        map.remove(key);
    }

    async fn fetch_with_retries(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        let max_attempts = self.config.retry.max_attempts;
        let mut last_err = None;
        for attempt in 1..=max_attempts {
            match self.fetch_once(exchange).await {
                Ok(text) => return Ok(text),
                Err(err) if err_is_retryable(&err) && attempt < max_attempts => {
                    let backoff = self.config.retry.backoff_after(attempt);
                    tokio::time::sleep(backoff).await;
                    last_err = Some(err);
                }
                Err(err) if err_is_retryable(&err) => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: max_attempts,
                        source: Box::new(err),
                    })
                }
                Err(err) => return Err(err),
            }
        }
        // max_attempts >= 1, so the loop always returns; keep the compiler happy.
        Err(last_err.unwrap_or(GatewayError::EmptyBatch))
    }

    async fn fetch_once(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        let _permit = self
            .limiter
            .acquire()
            .await
            .expect("gateway semaphore closed");
        let client = self
            .client
            .as_ref()
            .expect("no http client outside live/record mode");
        let base = self.config.base_url_for(exchange.purpose);
        let url = format!("{}/chat/completions", base.trim_end_matches('/'));
        let body = CompletionRequest {
            model: &exchange.model,
            messages: &exchange.messages,
            temperature: exchange.temperature,
            max_tokens: exchange.max_tokens,
        };
        let mut request = client.post(&url).json(&body);
        if let Some(key) = self.config.api_key_for(exchange.purpose) {
            request = request.bearer_auth(key);
        }
        let response = request.send().await.map_err(|e| GatewayError::Network {
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().await.map_err(|e| GatewayError::Network {
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: truncate_for_error(&text),
            });
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse {
                message: format!("{e} in body {}", truncate_for_error(&text)),
            })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse {
                message: "no choices[0].message.content".to_string(),
            })
    }
}

fn err_is_retryable(err: &GatewayError) -> bool {
    match err {
        GatewayError::Network { .. } => true,
        GatewayError::Http { status, .. } => {
            *status == 408 || *status == 429 || (500..600).contains(&u32::from(*status))
        }
        _ => false,
    }
}

fn truncate_for_error(body: &str) -> String {
    const LIMIT: usize = 300;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let mut end = LIMIT;
        while !body.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &body[..end])
    }
}
