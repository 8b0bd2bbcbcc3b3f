//! Chat-completion providers and entailment-label parsing.
//!
//! `Remote` speaks the common `{model, messages, temperature, max_tokens}` →
//! `{choices: [{message: {content}}]}` protocol. `Mock` answers from a script
//! file keyed by the SHA-256 of the rendered prompt.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::http::{HttpClient, HttpFailure, RetryPolicy};
use crate::ingest::read_jsonl;
use crate::label::EntailmentLabel;
use crate::prompts::MessageSeq;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(HttpFailure),
    #[error("provider timed out: {0}")]
    Timeout(HttpFailure),
    #[error("mock script has no response for model `{model}`, prompt {prompt_sha256}")]
    ScriptMiss { model: String, prompt_sha256: String },
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("invalid chat provider: {0}")]
    InvalidSpec(String),
    #[error("cannot read mock script {path}: {source}")]
    Script {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatKind {
    Remote,
    Mock,
}

fn default_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_tokens() -> u32 {
    512
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_api_key_env() -> Option<String> {
    Some("OPENAI_API_KEY".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatProviderSpec {
    pub kind: ChatKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_name: String,
    /// Sampling temperature; annotation runs use 0, generation runs 1.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub requests_per_minute: Option<f64>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Script file for the mock provider.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

impl ChatProviderSpec {
    pub fn mock(model_name: impl Into<String>, script: impl Into<PathBuf>) -> Self {
        Self {
            kind: ChatKind::Mock,
            endpoint: None,
            model_name: model_name.into(),
            temperature: 0.0,
            max_retries: default_retries(),
            timeout_secs: default_timeout_secs(),
            max_tokens: default_max_tokens(),
            backoff_ms: default_backoff_ms(),
            api_key_env: None,
            requests_per_minute: None,
            max_in_flight: default_in_flight(),
            script: Some(script.into()),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: ChatKind::Remote,
            endpoint: Some(endpoint.into()),
            script: None,
            api_key_env: default_api_key_env(),
            ..Self::mock(model_name, "")
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidSpec(format!("temperature {} < 0", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidSpec("max_in_flight must be positive".into()));
        }
        if matches!(self.requests_per_minute, Some(r) if !(r > 0.0)) {
            return Err(GatewayError::InvalidSpec("requests_per_minute must be positive".into()));
        }
        match self.kind {
            ChatKind::Remote if self.endpoint.is_none() => {
                Err(GatewayError::InvalidSpec("remote provider requires an endpoint".into()))
            }
            ChatKind::Mock if self.script.is_none() => {
                Err(GatewayError::InvalidSpec("mock provider requires a script".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One model response plus the data needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    pub prompt_sha256: String,
    #[serde(with = "millis")]
    pub latency: Duration,
    pub retries: u32,
    /// Set when the provider returned no content.
    pub empty: bool,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub trait ChatProvider: Send + Sync {
    fn spec(&self) -> &ChatProviderSpec;

    fn complete(&self, prompt: &MessageSeq) -> Result<Completion, GatewayError>;
}

/// Builds the provider described by `spec`.
pub fn provider_for(name: &str, spec: &ChatProviderSpec) -> Result<Box<dyn ChatProvider>, GatewayError> {
    spec.validate()?;
    Ok(match spec.kind {
        ChatKind::Mock => Box::new(MockChat::from_spec(name, spec.clone())?),
        ChatKind::Remote => Box::new(RemoteChat::new(name, spec.clone())),
    })
}

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub prompt_sha256: String,
    pub response_text: String,
    /// Restricts the entry to one model; unset entries answer any model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

type ScriptKey = (Option<String>, String);

/// Scripted provider. Several entries for one key are served in file order;
/// the last one then repeats.
pub struct MockChat {
    name: String,
    spec: ChatProviderSpec,
    entries: HashMap<ScriptKey, Vec<String>>,
    cursor: Mutex<HashMap<ScriptKey, usize>>,
}

impl MockChat {
    pub fn new(name: &str, spec: ChatProviderSpec, script: Vec<ScriptEntry>) -> Self {
        let mut entries: HashMap<ScriptKey, Vec<String>> = HashMap::new();
        for e in script {
            entries.entry((e.model, e.prompt_sha256)).or_default().push(e.response_text);
        }
        Self { name: name.into(), spec, entries, cursor: Mutex::new(HashMap::new()) }
    }

    pub fn from_spec(name: &str, spec: ChatProviderSpec) -> Result<Self, GatewayError> {
        let path = spec.script.clone().unwrap_or_default();
        let script = load_script(&path)?;
        Ok(Self::new(name, spec, script))
    }

    fn lookup(&self, hash: &str) -> Option<String> {
        let specific = (Some(self.spec.model_name.clone()), hash.to_string());
        let key = if self.entries.contains_key(&specific) { specific } else { (None, hash.to_string()) };
        let list = self.entries.get(&key)?;
        let mut cur = self.cursor.lock().unwrap();
        let i = cur.entry(key).or_insert(0);
        let text = list[(*i).min(list.len() - 1)].clone();
        *i += 1;
        Some(text)
    }
}

pub fn load_script(path: &Path) -> Result<Vec<ScriptEntry>, GatewayError> {
    read_jsonl(path).map_err(|source| GatewayError::Script { path: path.display().to_string(), source })
}

impl ChatProvider for MockChat {
    fn spec(&self) -> &ChatProviderSpec {
        &self.spec
    }

    fn complete(&self, prompt: &MessageSeq) -> Result<Completion, GatewayError> {
        let hash = prompt.sha256();
        let text = self.lookup(&hash).ok_or_else(|| GatewayError::ScriptMiss {
            model: self.spec.model_name.clone(),
            prompt_sha256: hash.clone(),
        })?;
        log::debug!("mock completion prompt={hash} model={} temperature={}", self.spec.model_name, self.spec.temperature);
        Ok(Completion {
            empty: text.trim().is_empty(),
            text,
            provider: self.name.clone(),
            model: self.spec.model_name.clone(),
            temperature: self.spec.temperature,
            prompt_sha256: hash,
            latency: Duration::ZERO,
            retries: 0,
        })
    }
}

/// Token bucket limiting the sustained request rate; burst of one second's worth.
pub struct TokenBucket {
    rate_per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn per_minute(rpm: f64) -> Self {
        let rate = rpm / 60.0;
        let capacity = rate.max(1.0);
        Self { rate_per_sec: rate, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(st.1).as_secs_f64();
                st.0 = (st.0 + elapsed * self.rate_per_sec).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.rate_per_sec
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Counting semaphore bounding concurrent requests.
pub struct InFlight {
    max: usize,
    count: Mutex<usize>,
    cv: Condvar,
}

pub struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), count: Mutex::new(0), cv: Condvar::new() }
    }

    pub fn enter(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard(self)
    }

    pub fn current(&self) -> usize {
        *self.count.lock().unwrap()
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a MessageSeq,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct RemoteChat {
    name: String,
    spec: ChatProviderSpec,
    client: HttpClient,
    limiter: Option<TokenBucket>,
    in_flight: InFlight,
}

impl RemoteChat {
    pub fn new(name: &str, spec: ChatProviderSpec) -> Self {
        let client = HttpClient::new(Duration::from_secs(spec.timeout_secs), spec.api_key_env.as_deref());
        Self {
            name: name.into(),
            limiter: spec.requests_per_minute.map(TokenBucket::per_minute),
            in_flight: InFlight::new(spec.max_in_flight),
            client,
            spec,
        }
    }
}

impl ChatProvider for RemoteChat {
    fn spec(&self) -> &ChatProviderSpec {
        &self.spec
    }

    fn complete(&self, prompt: &MessageSeq) -> Result<Completion, GatewayError> {
        let _slot = self.in_flight.enter();
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let hash = prompt.sha256();
        let body = ChatRequest {
            model: &self.spec.model_name,
            messages: prompt,
            temperature: self.spec.temperature,
            max_tokens: self.spec.max_tokens,
        };
        let policy = RetryPolicy::exponential(self.spec.max_retries, Duration::from_millis(self.spec.backoff_ms));
        let started = Instant::now();
        let url = self.spec.endpoint.as_deref().unwrap_or_default();
        let reply = self.client.post_json(url, &body, &policy).map_err(|f| {
            if f.timed_out {
                GatewayError::Timeout(f)
            } else {
                GatewayError::ProviderUnavailable(f)
            }
        })?;
        let latency = started.elapsed();
        let parsed: ChatResponse =
            serde_json::from_value(reply.body).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::BadResponse("no choices".into()))?
            .message
            .content
            .unwrap_or_default();
        log::info!(
            "completion prompt={hash} model={} temperature={} retries={} latency_ms={}",
            self.spec.model_name,
            self.spec.temperature,
            reply.retries,
            latency.as_millis()
        );
        Ok(Completion {
            empty: text.trim().is_empty(),
            text,
            provider: self.name.clone(),
            model: self.spec.model_name.clone(),
            temperature: self.spec.temperature,
            prompt_sha256: hash,
            latency,
            retries: reply.retries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no entailment label found in response")]
pub struct UnparsableResponse;

fn final_answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)final\s+(?:answer|choice)\s*(?:is|:)?\s*[:\-]?\s*[*(\[\x22']*\s*(entailment|neutral|contradiction)\b")
            .unwrap()
    })
}

fn keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(entailment|neutral|contradiction)\b").unwrap())
}

/// Extracts a label from free text. An explicit "final answer is X" wins;
/// otherwise the last label keyword in the text is used.
pub fn parse_entailment(text: &str) -> Result<EntailmentLabel, UnparsableResponse> {
    let pick = |re: &Regex| re.captures_iter(text).last().map(|c| c[1].parse::<EntailmentLabel>());
    match pick(final_answer_re()).or_else(|| pick(keyword_re())) {
        Some(Ok(l)) => Ok(l),
        _ => Err(UnparsableResponse),
    }
}
