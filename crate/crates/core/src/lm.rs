//! Completion-style language model backends.
//!
//! [`HttpBackend`] talks to any endpoint accepting
//! `{model, prompt, max_tokens, temperature, stop}` and answering
//! `{choices: [{text, finish_reason}]}`. [`ScriptedBackend`] replays
//! completions keyed by the SHA-256 of the prompt, and [`EchoBackend`]
//! returns a constant.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default completion length limit.
pub const DEFAULT_MAX_COMPLETION_UNITS: u32 = 120;

/// Stop sequences matching the prompt layout: `--` starts the instruction
/// comment, a blank line or `Example` starts the next block.
pub const DEFAULT_STOP: [&str; 3] = ["--", "\n\n", "Example"];

pub const ENV_URL: &str = "ICDST_LM_URL";
pub const ENV_TOKEN: &str = "ICDST_LM_TOKEN";
pub const ENV_MODEL: &str = "ICDST_LM_MODEL";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("endpoint returned {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("no scripted completion for prompt {hash}")]
    ScriptedMiss { hash: String },
    #[error("missing configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Fixture { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_completion_units: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), LmError> {
        if !(self.temperature >= 0.0) {
            return Err(LmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_completion_units == 0 {
            return Err(LmError::InvalidRequest("max_completion_units must be > 0".into()));
        }
        if self.stop_sequences.len() > 4 {
            return Err(LmError::InvalidRequest("at most 4 stop sequences".into()));
        }
        Ok(())
    }
}

/// Greedy decoding with the default length limit and stop sequences.
pub fn default_request(prompt: &str) -> CompletionRequest {
    CompletionRequest {
        prompt: prompt.to_string(),
        max_completion_units: DEFAULT_MAX_COMPLETION_UNITS,
        temperature: 0.0,
        stop_sequences: DEFAULT_STOP.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LmError>;
}

/// `complete(backend, req)`.
pub fn complete(
    backend: &dyn CompletionBackend,
    req: &CompletionRequest,
) -> Result<CompletionResult, LmError> {
    req.validate()?;
    backend.complete(req)
}

/// Hex SHA-256 of the prompt bytes.
pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Returns the same text for every prompt.
#[derive(Clone, Debug)]
pub struct EchoBackend {
    pub text: String,
}

impl EchoBackend {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

impl CompletionBackend for EchoBackend {
    fn complete(&self, _req: &CompletionRequest) -> Result<CompletionResult, LmError> {
        Ok(CompletionResult {
            text: self.text.clone(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FixtureLine {
    prompt_sha256: String,
    completion: String,
}

/// Completions looked up by prompt hash. Read-only once built.
#[derive(Clone, Debug, Default)]
pub struct ScriptedBackend {
    table: HashMap<String, String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: &str, completion: impl Into<String>) {
        self.table.insert(prompt_sha256(prompt), completion.into());
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Reads `{prompt_sha256, completion}` lines.
    pub fn load(path: &Path) -> Result<Self, LmError> {
        let fixture_err = |message: String| LmError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| fixture_err(e.to_string()))?;
        let mut table = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| fixture_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureLine = serde_json::from_str(&line)
                .map_err(|e| fixture_err(format!("line {}: {e}", i + 1)))?;
            table.insert(entry.prompt_sha256, entry.completion);
        }
        Ok(Self { table })
    }

    /// Writes entries sorted by hash.
    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let fixture_err = |e: std::io::Error| LmError::Fixture {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut out = BufWriter::new(File::create(path).map_err(fixture_err)?);
        let mut keys: Vec<&String> = self.table.keys().collect();
        keys.sort();
        for k in keys {
            let line = FixtureLine {
                prompt_sha256: k.clone(),
                completion: self.table[k].clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("fixture serializes"))
                .map_err(fixture_err)?;
        }
        out.flush().map_err(fixture_err)
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LmError> {
        let hash = prompt_sha256(&req.prompt);
        match self.table.get(&hash) {
            Some(text) => Ok(CompletionResult {
                text: text.clone(),
                finish_reason: FinishReason::Stop,
                latency_ms: 0,
            }),
            None => Err(LmError::ScriptedMiss { hash }),
        }
    }
}

/// Exponential backoff: `base * factor^(attempt - 1)` between attempts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base
            .mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard { permits: self }
    }
}

struct PermitGuard<'a> {
    permits: &'a Permits,
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.permits.free.lock().expect("permit lock") += 1;
        self.permits.cv.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

enum Attempt {
    Retry(String),
    Fatal(LmError),
}

/// Blocking HTTP client for a completions endpoint.
#[derive(Debug)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
    model: Option<String>,
    retry: RetryPolicy,
    permits: Permits,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, token: Option<String>, model: Option<String>) -> Self {
        Self {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("HTTP client builds"),
            url: url.into(),
            token,
            model,
            retry: RetryPolicy::default(),
            permits: Permits::new(4),
        }
    }

    /// Reads the endpoint, bearer token and model name from the environment.
    pub fn from_env() -> Result<Self, LmError> {
        let url = std::env::var(ENV_URL).map_err(|_| LmError::Config(format!("{ENV_URL} is not set")))?;
        Ok(Self::new(
            url,
            std::env::var(ENV_TOKEN).ok(),
            std::env::var(ENV_MODEL).ok(),
        ))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("HTTP client builds");
        self
    }

    /// Maximum number of requests in flight across all callers.
    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.permits = Permits::new(n);
        self
    }

    fn attempt(&self, req: &CompletionRequest) -> Result<CompletionResult, Attempt> {
        let body = WireRequest {
            model: self.model.as_deref(),
            prompt: &req.prompt,
            max_tokens: req.max_completion_units,
            temperature: req.temperature,
            stop: &req.stop_sequences,
        };
        let mut call = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            call = call.bearer_auth(token);
        }
        let started = Instant::now();
        let resp = call.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                Attempt::Retry(e.to_string())
            } else {
                Attempt::Fatal(LmError::BadResponse(e.to_string()))
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        let text = resp
            .text()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Fatal(LmError::Http {
                status: status.as_u16(),
                body: text,
            }));
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(LmError::BadResponse(e.to_string())))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Fatal(LmError::BadResponse("no choices".into())))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        let text = match choice.text.strip_prefix(req.prompt.as_str()) {
            Some(rest) if !req.prompt.is_empty() => rest.to_string(),
            _ => choice.text,
        };
        Ok(CompletionResult {
            text,
            finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LmError> {
        req.validate()?;
        let _permit = self.permits.acquire();
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.attempt(req) {
                Ok(result) => return Ok(result),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    log::warn!("completion attempt {attempt} failed: {reason}");
                    last = reason;
                    if attempt < self.retry.max_attempts {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(LmError::ExhaustedRetries {
            attempts: self.retry.max_attempts,
            last,
        })
    }
}
