//! Uniform interface to the language model that drives the agent.
//!
//! Three implementations share one trait: a live chat-completion endpoint,
//! a scripted backend that replays a fixed queue of turns, and a replay
//! backend that additionally asserts the observations recorded alongside
//! each turn. Scripted and replay backends are bit-deterministic, which is
//! what makes sessions reproducible in tests.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the bearer token for the live endpoint.
pub const API_KEY_ENV: &str = "MODEL_API_KEY";
/// Environment variable holding the endpoint base URL.
pub const API_BASE_ENV: &str = "MODEL_API_BASE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    Agent,
    Environment,
}

/// One message in the running conversation. A conversation starts with
/// exactly one system message (the instruction template).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn agent(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Agent,
            content: content.into(),
        }
    }

    pub fn environment(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Environment,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpEndpoint,
    Scripted,
    Replay,
}

/// Backend construction parameters.
///
/// Acceptance-test runs keep `temperature` at 0 so results are
/// deterministic end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL for the http kind; falls back to `MODEL_API_BASE`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    /// Turn fixture for the scripted and replay kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<PathBuf>,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_turn_tokens")]
    pub max_turn_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
}

fn default_model_name() -> String {
    "default".to_string()
}

fn default_max_turn_tokens() -> u32 {
    1024
}

fn default_timeout_secs() -> u64 {
    60
}

impl BackendConfig {
    pub fn scripted(fixture_path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            endpoint_url: None,
            fixture_path: Some(fixture_path.into()),
            model_name: default_model_name(),
            temperature: 0.0,
            max_turn_tokens: default_max_turn_tokens(),
            request_timeout_secs: default_timeout_secs(),
        }
    }

    pub fn replay(fixture_path: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            fixture_path: Some(fixture_path.into()),
            ..BackendConfig::scripted("")
        }
    }

    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::HttpEndpoint,
            endpoint_url: Some(endpoint_url.into()),
            fixture_path: None,
            model_name: model_name.into(),
            temperature: 0.0,
            max_turn_tokens: default_max_turn_tokens(),
            request_timeout_secs: default_timeout_secs(),
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    /// Network failure or timeout after the bounded retries.
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    /// The fixture is shorter than the number of requested turns.
    #[error("replay fixture exhausted after {turns} turns")]
    ReplayExhausted { turns: usize },
    /// A recomputed observation did not match the recorded one.
    #[error("replay diverged at turn {turn}: expected observation {expected:?}, got {actual:?}")]
    ReplayDiverged {
        turn: usize,
        expected: String,
        actual: String,
    },
    #[error("backend configuration error: {0}")]
    Config(String),
}

/// A source of model completions. One completion call returns the raw text
/// of one turn and never mutates the supplied history.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, history: &[ChatMessage]) -> Result<String, BackendError>;
}

/// Deterministic backend that replays a fixed queue of turns.
pub struct ScriptedBackend {
    turns: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(turns: Vec<String>) -> Self {
        ScriptedBackend {
            turns,
            cursor: Mutex::new(0),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read {}: {e}", path.display())))?;
        let turns: Vec<String> = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Config(format!("bad scripted fixture: {e}")))?;
        Ok(ScriptedBackend::new(turns))
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, _history: &[ChatMessage]) -> Result<String, BackendError> {
        let mut cursor = self.cursor.lock().expect("scripted cursor poisoned");
        if *cursor >= self.turns.len() {
            return Err(BackendError::ReplayExhausted {
                turns: self.turns.len(),
            });
        }
        let turn = self.turns[*cursor].clone();
        *cursor += 1;
        Ok(turn)
    }
}

/// One recorded turn: the raw model text plus the observation that followed
/// it in the original session, used to assert tool outputs during replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayTurn {
    pub model_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_observation: Option<String>,
}

/// A recorded session; the replay backend serves its turns in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub turns: Vec<ReplayTurn>,
}

/// Replays a recorded session and diverges loudly if the engine's
/// recomputed observations drift from the recording. Holds per-session
/// cursor state, so one instance must not be shared across sessions.
pub struct ReplayBackend {
    fixture: ReplayFixture,
    cursor: Mutex<usize>,
}

impl ReplayBackend {
    pub fn new(fixture: ReplayFixture) -> Self {
        ReplayBackend {
            fixture,
            cursor: Mutex::new(0),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read {}: {e}", path.display())))?;
        let fixture: ReplayFixture = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Config(format!("bad replay fixture: {e}")))?;
        Ok(ReplayBackend::new(fixture))
    }
}

impl ModelBackend for ReplayBackend {
    fn complete(&self, history: &[ChatMessage]) -> Result<String, BackendError> {
        let mut cursor = self.cursor.lock().expect("replay cursor poisoned");
        let turn = *cursor;
        if turn >= self.fixture.turns.len() {
            return Err(BackendError::ReplayExhausted {
                turns: self.fixture.turns.len(),
            });
        }
        if turn > 0 {
            if let Some(expected) = &self.fixture.turns[turn - 1].expected_observation {
                let actual = history
                    .iter()
                    .rev()
                    .find(|m| m.role == Role::Environment)
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                if actual != expected {
                    return Err(BackendError::ReplayDiverged {
                        turn,
                        expected: expected.clone(),
                        actual: actual.to_string(),
                    });
                }
            }
        }
        let text = self.fixture.turns[turn].model_text.clone();
        *cursor += 1;
        Ok(text)
    }
}

/// Live chat-completion client speaking the de-facto request shape
/// (model, messages, temperature) with bearer-token auth.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    model_name: String,
    temperature: f64,
    max_turn_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    content: String,
}

const MAX_RETRIES: usize = 2;

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        let base_url = config
            .endpoint_url
            .clone()
            .or_else(|| std::env::var(API_BASE_ENV).ok())
            .ok_or_else(|| {
                BackendError::Config(format!(
                    "http backend needs an endpoint URL (flag or {API_BASE_ENV})"
                ))
            })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            model_name: config.model_name.clone(),
            temperature: config.temperature,
            max_turn_tokens: config.max_turn_tokens,
        })
    }

    fn request_once(&self, history: &[ChatMessage]) -> Result<String, (bool, String)> {
        let messages: Vec<WireMessage> = history
            .iter()
            .map(|m| WireMessage {
                role: match m.role {
                    Role::System => "system",
                    Role::Agent => "assistant",
                    Role::Environment => "user",
                },
                content: &m.content,
            })
            .collect();
        let body = WireRequest {
            model: &self.model_name,
            messages,
            temperature: self.temperature,
            max_tokens: self.max_turn_tokens,
        };
        let mut request = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| (e.is_timeout() || e.is_connect(), e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let transient = status.is_server_error() || status.as_u16() == 429;
            return Err((transient, format!("endpoint returned {status}")));
        }
        let parsed: WireResponse = response
            .json()
            .map_err(|e| (false, format!("unparseable completion: {e}")))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or((false, "completion carried no choices".to_string()))
    }
}

impl ModelBackend for HttpBackend {
    fn complete(&self, history: &[ChatMessage]) -> Result<String, BackendError> {
        let mut delay = Duration::from_millis(250);
        let mut last_error = String::new();
        for attempt in 0..=MAX_RETRIES {
            match self.request_once(history) {
                Ok(text) => return Ok(text),
                Err((transient, message)) => {
                    last_error = message;
                    if !transient || attempt == MAX_RETRIES {
                        break;
                    }
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
        Err(BackendError::Unavailable(last_error))
    }
}

/// Construct a backend from its configuration.
pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn ModelBackend>, BackendError> {
    match config.kind {
        BackendKind::Scripted => {
            let path = config
                .fixture_path
                .as_ref()
                .ok_or_else(|| BackendError::Config("scripted backend needs a fixture".into()))?;
            Ok(Box::new(ScriptedBackend::from_path(path)?))
        }
        BackendKind::Replay => {
            let path = config
                .fixture_path
                .as_ref()
                .ok_or_else(|| BackendError::Config("replay backend needs a fixture".into()))?;
            Ok(Box::new(ReplayBackend::from_path(path)?))
        }
        BackendKind::HttpEndpoint => Ok(Box::new(HttpBackend::from_config(config)?)),
    }
}
