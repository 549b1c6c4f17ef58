//! LLM access: a chat-completions HTTP client and a table-driven mock.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::formats::TabularFormat;
use crate::hash::Fnv1a;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_SAMPLES: usize = 5;
pub const API_KEY_ENV: &str = "FLEXTAB_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("malformed endpoint response: {0}")]
    Protocol(String),
    #[error("cannot load mock fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    #[default]
    Greedy,
    Sample,
}

impl FromStr for Decoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "greedy" => Ok(Decoding::Greedy),
            "sample" => Ok(Decoding::Sample),
            other => Err(format!("unknown decoding {other:?}")),
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decoding::Greedy => "greedy",
            Decoding::Sample => "sample",
        })
    }
}

/// Identifies which (instance, format) a prompt was built for. The HTTP
/// client ignores it; the mock uses it to look up scripted completions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestTag {
    pub instance_id: String,
    pub format: TabularFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub decoding: Decoding,
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub tag: Option<RequestTag>,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            decoding: Decoding::Greedy,
            temperature: 0.0,
            n_samples: 1,
            max_tokens: 512,
            stop_sequences: Vec::new(),
            tag: None,
        }
    }

    pub fn sample(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            decoding: Decoding::Sample,
            temperature: DEFAULT_TEMPERATURE,
            n_samples: DEFAULT_SAMPLES,
            ..Self::greedy(prompt)
        }
    }

    pub fn with_tag(mut self, instance_id: impl Into<String>, format: TabularFormat) -> Self {
        self.tag = Some(RequestTag {
            instance_id: instance_id.into(),
            format,
        });
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |m: &str| Err(BackendError::InvalidRequest(m.to_string()));
        if self.n_samples == 0 {
            return invalid("n_samples must be positive");
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be positive");
        }
        if self.decoding == Decoding::Greedy && self.n_samples != 1 {
            return invalid("greedy decoding requires n_samples = 1");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid("temperature must be a non-negative number");
        }
        Ok(())
    }

    fn effective_temperature(&self) -> f64 {
        match self.decoding {
            Decoding::Greedy => 0.0,
            Decoding::Sample => self.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Aggregated token log-probability (mean by default), always finite.
    pub mean_logprob: f64,
    /// Answer supplied directly by a mock fixture for program formats, so
    /// runs work without a program runner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_resolved: Option<String>,
}

/// How token log-probabilities are reduced to one number per completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogprobAggregate {
    #[default]
    Mean,
    Sum,
}

impl FromStr for LogprobAggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mean" => Ok(LogprobAggregate::Mean),
            "sum" => Ok(LogprobAggregate::Sum),
            other => Err(format!("unknown logprob aggregate {other:?}")),
        }
    }
}

impl LogprobAggregate {
    /// Empty input yields 0, which leaves tie-breaks to canonical order.
    pub fn reduce(self, logprobs: &[f64]) -> f64 {
        if logprobs.is_empty() {
            return 0.0;
        }
        let sum: f64 = logprobs.iter().sum();
        match self {
            LogprobAggregate::Sum => sum,
            LogprobAggregate::Mean => sum / logprobs.len() as f64,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Returns exactly `request.n_samples` completions.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError>;

    /// Number of `generate` calls served so far.
    fn calls(&self) -> usize;
}

/// One scripted completion in a mock fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRecord {
    pub instance_id: String,
    pub format: TabularFormat,
    #[serde(default)]
    pub sample_index: usize,
    pub text: String,
    pub mean_logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

/// Deterministic backend driven by a fixture of scripted completions.
///
/// Lookups go by (instance id, format, sample index) from the request tag.
/// Anything unscripted gets a synthetic completion derived from
/// (seed, prompt, sample index) alone.
#[derive(Debug, Default)]
pub struct MockBackend {
    seed: u64,
    script: HashMap<(String, TabularFormat, usize), Completion>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, record: MockRecord) {
        self.script.insert(
            (record.instance_id, record.format, record.sample_index),
            Completion {
                text: record.text,
                mean_logprob: record.mean_logprob,
                pre_resolved: record.answer,
            },
        );
    }

    pub fn from_records(seed: u64, records: impl IntoIterator<Item = MockRecord>) -> Self {
        let mut mock = MockBackend::new(seed);
        for r in records {
            mock.insert(r);
        }
        mock
    }

    pub fn from_fixture(path: impl AsRef<Path>, seed: u64) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        let mut mock = MockBackend::new(seed);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Fixture(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: MockRecord =
                serde_json::from_str(&line).map_err(|e| BackendError::Fixture(format!("line {}: {e}", i + 1)))?;
            if !record.mean_logprob.is_finite() {
                return Err(BackendError::Fixture(format!("line {}: non-finite logprob", i + 1)));
            }
            mock.insert(record);
        }
        Ok(mock)
    }

    fn synthetic(&self, prompt: &str, index: usize) -> Completion {
        let mut h = Fnv1a::default();
        h.write(&self.seed.to_le_bytes())
            .write(prompt.as_bytes())
            .write(&(index as u64).to_le_bytes());
        let v = h.finish();
        Completion {
            text: format!("no scripted completion ({v:016x}), so the answer is: {}", v % 100),
            mean_logprob: -(((v >> 32) % 1000) as f64) / 1000.0,
            pre_resolved: None,
        }
    }
}

impl Backend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok((0..request.n_samples)
            .map(|i| {
                request
                    .tag
                    .as_ref()
                    .and_then(|t| self.script.get(&(t.instance_id.clone(), t.format, i)))
                    .cloned()
                    .unwrap_or_else(|| self.synthetic(&request.prompt, i))
            })
            .collect())
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL up to, not including, `/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub logprob_aggregate: LogprobAggregate,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout: Duration::from_secs(120),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            logprob_aggregate: LogprobAggregate::Mean,
        }
    }
}

/// Chat-completions client with per-request timeout and exponential backoff.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            config,
            client,
            calls: AtomicUsize::new(0),
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &GenerationRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.effective_temperature(),
            "n": request.n_samples,
            "max_tokens": request.max_tokens,
            "logprobs": true,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        body
    }

    fn attempt(&self, request: &GenerationRequest, attempts: u32) -> Result<Vec<Completion>, Attempt> {
        let mut builder = self.client.post(self.endpoint()).json(&self.body(request));
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            Attempt::Retry(if e.is_timeout() {
                BackendError::Timeout { attempts }
            } else {
                BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                }
            })
        })?;
        let status = response.status();
        if !status.is_success() {
            let err = BackendError::Status {
                status: status.as_u16(),
                attempts,
                body: response.text().unwrap_or_default(),
            };
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err(if retryable {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let value: serde_json::Value = response.json().map_err(|e| {
            Attempt::Retry(if e.is_timeout() {
                BackendError::Timeout { attempts }
            } else {
                BackendError::Protocol(e.to_string())
            })
        })?;
        parse_chat_response(&value, self.config.logprob_aggregate, request.n_samples).map_err(Attempt::Fatal)
    }
}

/// Extracts completions from an OpenAI-style chat-completions response.
pub fn parse_chat_response(
    value: &serde_json::Value,
    aggregate: LogprobAggregate,
    expected: usize,
) -> Result<Vec<Completion>, BackendError> {
    let choices = value["choices"]
        .as_array()
        .ok_or_else(|| BackendError::Protocol("response has no choices array".into()))?;
    if choices.len() != expected {
        return Err(BackendError::Protocol(format!(
            "expected {expected} choices, got {}",
            choices.len()
        )));
    }
    let mut indexed: Vec<(u64, Completion)> = choices
        .iter()
        .enumerate()
        .map(|(pos, choice)| {
            let text = choice["message"]["content"].as_str().unwrap_or_default().to_string();
            let logprobs: Vec<f64> = choice["logprobs"]["content"]
                .as_array()
                .map(|toks| toks.iter().filter_map(|t| t["logprob"].as_f64()).collect())
                .unwrap_or_default();
            let mean_logprob = aggregate.reduce(&logprobs);
            let index = choice["index"].as_u64().unwrap_or(pos as u64);
            (
                index,
                Completion {
                    text,
                    mean_logprob: if mean_logprob.is_finite() {
                        mean_logprob
                    } else {
                        f64::MIN
                    },
                    pre_resolved: None,
                },
            )
        })
        .collect();
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, c)| c).collect())
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut backoff = self.config.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request, attempts) {
                Ok(c) => return Ok(c),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempts >= self.config.max_attempts.max(1) => return Err(e),
                Err(Attempt::Retry(_)) => {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}
