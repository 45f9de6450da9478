//! Completion backends: a live JSON-over-HTTP chat endpoint and a
//! deterministic replay backend keyed on normalized prompt digests.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;
use crate::gateway::memory::{ChatTurn, Role};

pub const API_KEY_ENV: &str = "DIALOGUE_FORGE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    /// Replay fixture path (replay kind only).
    #[serde(default)]
    pub fixture: Option<String>,
}

fn default_temperature() -> f64 {
    0.2
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    120
}

impl BackendConfig {
    pub fn replay(fixture: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            endpoint: None,
            model_name: "replay".to_string(),
            temperature: 0.2,
            max_retries: 3,
            request_timeout_secs: 120,
            fixture: Some(fixture.into()),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        match self.kind {
            BackendKind::Live if self.endpoint.is_none() => {
                Err(GatewayError::InvalidConfig("live backend requires an endpoint".into()))
            }
            BackendKind::Replay if self.fixture.is_none() => {
                Err(GatewayError::InvalidConfig("replay backend requires a fixture path".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One message as sent to a backend.
#[derive(Debug, Clone, Serialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

pub fn wire_role(role: Role) -> &'static str {
    match role {
        Role::Questioner => "user",
        Role::Solver => "assistant",
    }
}

pub trait CompletionBackend: Send + Sync {
    /// Completes the conversation; `prompt` is the newest questioner message
    /// (already the last element of `messages`).
    fn complete(&self, messages: &[WireMessage], prompt: &str) -> Result<String, GatewayError>;
}

/// Stable digest of a prompt with whitespace collapsed, so cosmetic template
/// edits do not invalidate replay fixtures.
pub fn prompt_digest(prompt: &str) -> String {
    let normalized: Vec<&str> = prompt.split_whitespace().collect();
    let mut hasher = Sha256::new();
    hasher.update(normalized.join(" ").as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureLine {
    digest: String,
    reply: String,
}

/// Deterministic replay backend: a pure function of the prompt digest.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    replies: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(GatewayError::FixtureIo)?;
        let mut replies = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(line).map_err(|e| {
                GatewayError::InvalidConfig(format!("fixture line {}: {e}", lineno + 1))
            })?;
            replies.insert(rec.digest, rec.reply);
        }
        Ok(ReplayBackend { replies })
    }

    pub fn insert_digest(&mut self, digest: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert(digest.into(), reply.into());
    }

    /// Registers a reply keyed by the digest of `prompt`.
    pub fn insert_prompt(&mut self, prompt: &str, reply: impl Into<String>) {
        self.replies.insert(prompt_digest(prompt), reply.into());
    }

    pub fn write_fixture(&self, path: &Path) -> Result<(), GatewayError> {
        let mut keys: Vec<_> = self.replies.keys().collect();
        keys.sort();
        let mut out = String::new();
        for digest in keys {
            let line = serde_json::to_string(&FixtureLine {
                digest: digest.clone(),
                reply: self.replies[digest].clone(),
            })
            .expect("fixture line serializes");
            out.push_str(&line);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(GatewayError::FixtureIo)
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, _messages: &[WireMessage], prompt: &str) -> Result<String, GatewayError> {
        let digest = prompt_digest(prompt);
        self.replies
            .get(&digest)
            .cloned()
            .ok_or(GatewayError::ReplayMiss { digest })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [WireMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Chat-completion client for an OpenAI-style endpoint. The API key comes
/// from `DIALOGUE_FORGE_API_KEY`.
pub struct LiveBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: String,
}

impl LiveBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| GatewayError::InvalidConfig(format!("{API_KEY_ENV} not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(LiveBackend {
            client,
            endpoint: config.endpoint.clone().expect("validated"),
            model: config.model_name.clone(),
            temperature: config.temperature,
            api_key,
        })
    }
}

impl CompletionBackend for LiveBackend {
    fn complete(&self, messages: &[WireMessage], _prompt: &str) -> Result<String, GatewayError> {
        let req = ChatRequest { model: &self.model, messages, temperature: self.temperature };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&req)
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(GatewayError::Transport(format!("http status {}", resp.status())));
        }
        let body: ChatResponse = resp.json().map_err(|e| GatewayError::Transport(e.to_string()))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::Transport("empty choices".into()))
    }
}

/// Test-support backend: scripted failures before a wrapped backend answers.
pub struct FlakyBackend<B> {
    inner: B,
    failures_remaining: Mutex<u32>,
}

impl<B> FlakyBackend<B> {
    pub fn new(inner: B, failures: u32) -> Self {
        FlakyBackend { inner, failures_remaining: Mutex::new(failures) }
    }
}

impl<B: CompletionBackend> CompletionBackend for FlakyBackend<B> {
    fn complete(&self, messages: &[WireMessage], prompt: &str) -> Result<String, GatewayError> {
        let mut left = self.failures_remaining.lock().unwrap();
        if *left > 0 {
            *left -= 1;
            return Err(GatewayError::Transport("injected transport failure".into()));
        }
        drop(left);
        self.inner.complete(messages, prompt)
    }
}

pub fn memory_to_wire(turns: &[&ChatTurn]) -> Vec<WireMessage> {
    turns
        .iter()
        .map(|t| WireMessage { role: wire_role(t.role).to_string(), content: t.content.clone() })
        .collect()
}
