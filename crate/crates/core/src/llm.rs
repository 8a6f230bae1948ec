//! Chat-completion client with an on-disk response cache and retries.
//!
//! The wire format is the common `{model, messages, temperature, max_tokens}`
//! request; the generated text is pulled out of the response with a JSON
//! pointer so different servers can be used without code changes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{error_chain, Error, Result};

/// Environment variable holding the bearer token for the chat endpoint.
pub const API_KEY_ENV: &str = "CRSCORE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Base delay in seconds; attempt `k` waits `backoff_base * 2^k`.
    pub backoff_base: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff_base: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub cache_dir: Option<PathBuf>,
    /// JSON pointer to the generated text inside the response body.
    pub response_path: String,
    pub timeout_s: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "Magicoder-S-DS-6.7B".into(),
            temperature: 0.0,
            max_tokens: 1024,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            cache_dir: None,
            response_path: "/choices/0/message/content".into(),
            timeout_s: 120,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature {} < 0", self.temperature)));
        }
        if self.retry.attempts < 1 {
            return Err(Error::Invalid("retry attempts must be >= 1".into()));
        }
        if self.max_in_flight < 1 {
            return Err(Error::Invalid("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn cache_key(&self) -> String {
        let body = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&body))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request: ChatRequest,
    response: String,
    timestamp: u64,
}

/// Where a reply came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplySource {
    Cache,
    Network,
}

/// Sends a request and returns the raw response body. Swappable for tests.
pub trait ChatTransport: Send + Sync {
    fn send(&self, endpoint: &str, request: &ChatRequest) -> std::result::Result<serde_json::Value, String>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Invalid(format!("http client: {e}")))?;
        Ok(HttpTransport {
            client,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, endpoint: &str, request: &ChatRequest) -> std::result::Result<serde_json::Value, String> {
        let mut req = self.client.post(endpoint).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| error_chain(&e))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        resp.json().map_err(|e| error_chain(&e))
    }
}

pub struct LlmClient {
    cfg: LlmClientConfig,
    transport: Box<dyn ChatTransport>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl LlmClient {
    pub fn new(cfg: LlmClientConfig) -> Result<Self> {
        cfg.validate()?;
        let transport = HttpTransport::new(Duration::from_secs(cfg.timeout_s))?;
        Ok(Self::with_transport(cfg, Box::new(transport)))
    }

    pub fn with_transport(cfg: LlmClientConfig, transport: Box<dyn ChatTransport>) -> Self {
        LlmClient {
            cfg,
            transport,
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.cfg.model.clone(),
            messages,
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_tokens,
        }
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cfg.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn read_cache(path: &Path, request: &ChatRequest) -> Option<String> {
        let bytes = fs::read(path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if &entry.request == request => Some(entry.response),
            Ok(_) => {
                log::warn!("cache entry {} does not match its request; ignoring", path.display());
                None
            }
            Err(e) => {
                log::warn!("discarding corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap();
        locks.entry(key.to_string()).or_default().clone()
    }

    /// Send a chat request, serving it from the cache when possible.
    pub fn complete(&self, messages: Vec<ChatMessage>) -> Result<(String, ReplySource)> {
        let request = self.request(messages);
        let key = request.cache_key();
        let path = self.cache_path(&key);
        if let Some(p) = &path {
            if let Some(hit) = Self::read_cache(p, &request) {
                return Ok((hit, ReplySource::Cache));
            }
        }

        let lock = self.key_lock(&key);
        let _guard = lock.lock().unwrap();
        // another thread may have filled the entry while we waited
        if let Some(p) = &path {
            if let Some(hit) = Self::read_cache(p, &request) {
                return Ok((hit, ReplySource::Cache));
            }
        }

        let text = self.send_with_retries(&request)?;
        if let Some(p) = &path {
            write_cache_entry(p, &request, &text)?;
        }
        Ok((text, ReplySource::Network))
    }

    fn send_with_retries(&self, request: &ChatRequest) -> Result<String> {
        let attempts = self.cfg.retry.attempts;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.retry.backoff_base * 2f64.powi(attempt as i32 - 1);
                if delay > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(delay));
                }
            }
            match self.transport.send(&self.cfg.endpoint, request) {
                Ok(body) => {
                    return body
                        .pointer(&self.cfg.response_path)
                        .and_then(|v| v.as_str())
                        .map(str::to_string)
                        .ok_or_else(|| {
                            Error::Protocol(format!(
                                "response has no string at `{}`",
                                self.cfg.response_path
                            ))
                        })
                }
                Err(e) => {
                    log::debug!("chat request attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}

fn write_cache_entry(path: &Path, request: &ChatRequest, response: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let entry = CacheEntry {
        request: request.clone(),
        response: response.to_string(),
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer_pretty(tmp.as_file(), &entry)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
