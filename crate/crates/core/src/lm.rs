//! Chat-completion gateway: one interface over a live OpenAI-style endpoint
//! and two deterministic test doubles, with retry, latency measurement and an
//! in-flight limit.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

pub const ENV_BASE_URL: &str = "GATE_LM_BASE_URL";
pub const ENV_API_KEY: &str = "GATE_LM_API_KEY";
pub const DEFAULT_MODEL: &str = "gpt-4-0613";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_IN_FLIGHT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("request has no messages")]
    EmptyRequest,
    #[error("transport failure after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("backend rejected the request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("scripted backend has no responses left (served {served})")]
    ScriptExhausted { served: usize },
    #[error("backend cannot estimate answer probabilities")]
    Incapable,
    #[error("degenerate probability estimate: {0}")]
    Degenerate(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { .. } | GatewayError::Timeout { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    /// Overrides the profile temperature for this request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// A single user-turn request.
    pub fn prompt(text: impl Into<String>) -> Self {
        Self {
            messages: vec![ChatMessage::user(text)],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub latency: Duration,
    pub backend: String,
    pub model_id: String,
    pub attempts: u32,
}

/// How `yes_probability` is estimated when the backend has no native answer
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ProbabilityFallback {
    /// `samples` calls at temperature 1 with seeds `seed..seed+samples`.
    Sampling { samples: u32 },
    /// One temperature-0 call mapped to {0, 1}.
    Single,
}

impl Default for ProbabilityFallback {
    fn default() -> Self {
        ProbabilityFallback::Sampling { samples: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    HttpChat {
        /// Falls back to `GATE_LM_BASE_URL`, then the public endpoint.
        #[serde(default)]
        base_url: Option<String>,
    },
    MockScripted {
        script: Vec<String>,
        /// Native p(yes) keyed by question text.
        #[serde(default)]
        yes_probabilities: BTreeMap<String, f64>,
        #[serde(default)]
        default_yes_probability: Option<f64>,
    },
    MockSeeded {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmProfile {
    pub backend: Backend,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout: Duration,
    #[serde(default = "default_backoff")]
    pub initial_backoff: Duration,
    #[serde(default)]
    pub probability_fallback: ProbabilityFallback,
    #[serde(default)]
    pub sampling_seed: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_model() -> String {
    DEFAULT_MODEL.to_string()
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> Duration {
    Duration::from_secs(60)
}
fn default_backoff() -> Duration {
    Duration::from_secs(1)
}
fn default_in_flight() -> usize {
    DEFAULT_IN_FLIGHT
}

impl LmProfile {
    pub fn new(backend: Backend) -> Self {
        Self {
            backend,
            model_id: default_model(),
            temperature: 0.0,
            max_retries: default_retries(),
            timeout: default_timeout(),
            initial_backoff: default_backoff(),
            probability_fallback: ProbabilityFallback::default(),
            sampling_seed: 0,
            max_in_flight: DEFAULT_IN_FLIGHT,
        }
    }

    pub fn scripted<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        Self::new(Backend::MockScripted {
            script: script.into_iter().map(Into::into).collect(),
            yes_probabilities: BTreeMap::new(),
            default_yes_probability: None,
        })
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(Backend::MockSeeded { seed })
    }

    pub fn http(base_url: Option<String>) -> Self {
        Self::new(Backend::HttpChat { base_url })
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidProfile(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidProfile("max_in_flight must be ≥ 1".into()));
        }
        if let Backend::MockScripted {
            yes_probabilities,
            default_yes_probability,
            ..
        } = &self.backend
        {
            let bad = yes_probabilities
                .values()
                .chain(default_yes_probability.iter())
                .any(|p| !(0.0..=1.0).contains(p));
            if bad {
                return Err(GatewayError::InvalidProfile("scripted p(yes) outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Text plus latency as seen by a backend. `latency: None` means the gateway
/// measures wall time itself.
#[derive(Debug, Clone)]
pub struct BackendReply {
    pub content: String,
    pub latency: Option<Duration>,
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &'static str;

    fn send(&self, profile: &LmProfile, request: &ChatRequest) -> Result<BackendReply, GatewayError>;

    /// Native answer-distribution estimate, when the backend has one.
    fn native_yes_probability(&self, _question: &str, _context: &str) -> Option<f64> {
        None
    }
}

struct ScriptedBackend {
    script: Vec<String>,
    cursor: Mutex<usize>,
    yes_probabilities: BTreeMap<String, f64>,
    default_yes_probability: Option<f64>,
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &'static str {
        "mock_scripted"
    }

    fn send(&self, _: &LmProfile, _: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let mut cursor = self.cursor.lock().expect("script cursor");
        let content = self
            .script
            .get(*cursor)
            .cloned()
            .ok_or(GatewayError::ScriptExhausted { served: *cursor })?;
        *cursor += 1;
        Ok(BackendReply {
            content,
            latency: Some(Duration::ZERO),
        })
    }

    fn native_yes_probability(&self, question: &str, _context: &str) -> Option<f64> {
        self.yes_probabilities
            .get(question)
            .copied()
            .or(self.default_yes_probability)
    }
}

/// Pure hash of (seed, request). Recognizes the request shapes used in this
/// crate so that offline runs produce well-formed replies.
struct SeededBackend {
    seed: u64,
}

impl SeededBackend {
    fn digest(&self, parts: &[&str]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        for part in parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hasher.finalize().into()
    }

    fn unit(digest: &[u8; 32]) -> f64 {
        let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        (bits >> 11) as f64 / (1u64 << 53) as f64
    }
}

const FORMAT_MARKER: &str = "in the following format, and nothing else: \"";

impl ChatBackend for SeededBackend {
    fn name(&self) -> &'static str {
        "mock_seeded"
    }

    fn send(&self, _: &LmProfile, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let mut parts: Vec<String> = request
            .messages
            .iter()
            .map(|m| format!("{:?}:{}", m.role, m.content))
            .collect();
        parts.push(format!("{:?}/{:?}", request.temperature, request.seed));
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        let digest = self.digest(&refs);
        let tag: String = digest[8..12].iter().map(|b| format!("{b:02x}")).collect();
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");

        let content = if last.contains("Answer with a probability between 0 and 1") {
            format!("{:.2}", Self::unit(&digest))
        } else if let Some(start) = last.find(FORMAT_MARKER) {
            let format = &last[start + FORMAT_MARKER.len()..];
            let format = format.strip_suffix('"').unwrap_or(format);
            format.replace(crate::domain::EDGE_CASE_SLOT, &format!("case-{tag}"))
        } else if last.contains("Answer the question in the shortest way")
            || last.contains("Answer with only \"yes\" or \"no\"")
        {
            if digest[12] & 1 == 0 { "yes" } else { "no" }.to_string()
        } else {
            format!("Mock question {tag}?")
        };
        Ok(BackendReply {
            content,
            latency: Some(Duration::ZERO),
        })
    }

    fn native_yes_probability(&self, question: &str, context: &str) -> Option<f64> {
        Some(Self::unit(&self.digest(&["p(yes)", question, context])))
    }
}

struct HttpChatBackend {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    fn new(profile: &LmProfile, base_url: Option<&str>) -> Self {
        let base = base_url
            .map(str::to_string)
            .or_else(|| std::env::var(ENV_BASE_URL).ok())
            .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(profile.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            agent,
            url: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key: std::env::var(ENV_API_KEY).ok(),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for HttpChatBackend {
    fn name(&self) -> &'static str {
        "http_chat"
    }

    fn send(&self, profile: &LmProfile, request: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let body = WireRequest {
            model: &profile.model_id,
            messages: &request.messages,
            temperature: request.temperature.unwrap_or(profile.temperature),
            seed: request.seed,
        };
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let transport = |reason: String| GatewayError::Transport { attempts: 1, reason };
        let mut response = call.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout { attempts: 1 },
            other => transport(other.to_string()),
        })?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(transport(format!("HTTP {status}")));
        }
        if status >= 400 {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(GatewayError::Rejected { status, body });
        }
        let parsed: WireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| transport(format!("malformed response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(BackendReply { content, latency: None })
    }
}

/// Counting semaphore for outbound requests.
struct InFlightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("limiter");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("limiter");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// p(yes) together with the LM time spent producing it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YesEstimate {
    pub probability: f64,
    pub latency: Duration,
}

pub struct Gateway {
    profile: LmProfile,
    backend: Box<dyn ChatBackend>,
    limiter: InFlightLimiter,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("model_id", &self.profile.model_id)
            .finish()
    }
}

impl Gateway {
    pub fn from_profile(profile: LmProfile) -> Result<Self, GatewayError> {
        profile.validate()?;
        let backend: Box<dyn ChatBackend> = match &profile.backend {
            Backend::HttpChat { base_url } => Box::new(HttpChatBackend::new(&profile, base_url.as_deref())),
            Backend::MockScripted {
                script,
                yes_probabilities,
                default_yes_probability,
            } => Box::new(ScriptedBackend {
                script: script.clone(),
                cursor: Mutex::new(0),
                yes_probabilities: yes_probabilities.clone(),
                default_yes_probability: *default_yes_probability,
            }),
            Backend::MockSeeded { seed } => Box::new(SeededBackend { seed: *seed }),
        };
        Ok(Self::with_backend(profile, backend))
    }

    /// Wraps a caller-supplied backend, e.g. a fault-injecting test double.
    pub fn with_backend(profile: LmProfile, backend: Box<dyn ChatBackend>) -> Self {
        let limiter = InFlightLimiter::new(profile.max_in_flight);
        Self {
            profile,
            backend,
            limiter,
        }
    }

    pub fn profile(&self) -> &LmProfile {
        &self.profile
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::EmptyRequest);
        }
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let mut backoff = self.profile.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.send(&self.profile, request) {
                Ok(reply) => {
                    if reply.content.trim().is_empty() {
                        return Err(GatewayError::EmptyResponse);
                    }
                    return Ok(ChatResponse {
                        content: reply.content,
                        latency: reply.latency.unwrap_or_else(|| started.elapsed()),
                        backend: self.backend.name().to_string(),
                        model_id: self.profile.model_id.clone(),
                        attempts: attempt,
                    });
                }
                Err(err) if err.is_retryable() && attempt <= self.profile.max_retries => {
                    warn!(attempt, ?backoff, error = %err, "chat request failed, retrying");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(GatewayError::Transport { reason, .. }) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        reason,
                    })
                }
                Err(GatewayError::Timeout { .. }) => return Err(GatewayError::Timeout { attempts: attempt }),
                Err(other) => return Err(other),
            }
        }
    }

    /// Probability that the answer to `question` given `context` is "yes".
    pub fn yes_probability(&self, question: &str, context: &str) -> Result<f64, GatewayError> {
        self.estimate_yes(question, context).map(|e| e.probability)
    }

    pub fn estimate_yes(&self, question: &str, context: &str) -> Result<YesEstimate, GatewayError> {
        if let Some(p) = self.backend.native_yes_probability(question, context) {
            return checked_probability(p).map(|probability| YesEstimate {
                probability,
                latency: Duration::ZERO,
            });
        }
        let prompt = yes_no_prompt(question, context);
        let (calls, temperature) = match self.profile.probability_fallback {
            ProbabilityFallback::Sampling { samples } => (samples.max(1), 1.0),
            ProbabilityFallback::Single => (1, 0.0),
        };
        let mut yes = 0u32;
        let mut counted = 0u32;
        let mut latency = Duration::ZERO;
        for i in 0..calls {
            let request = ChatRequest {
                messages: vec![ChatMessage::user(prompt.clone())],
                temperature: Some(temperature),
                seed: Some(self.profile.sampling_seed.wrapping_add(u64::from(i))),
            };
            let response = self.complete(&request)?;
            latency += response.latency;
            match parse_yes_no(&response.content) {
                Some(answer) => {
                    counted += 1;
                    yes += u32::from(answer);
                }
                None => warn!(reply = %response.content, "unparseable yes/no sample ignored"),
            }
        }
        if counted == 0 {
            return Err(GatewayError::Degenerate("no sample answered yes or no".into()));
        }
        checked_probability(f64::from(yes) / f64::from(counted)).map(|probability| YesEstimate { probability, latency })
    }
}

fn checked_probability(p: f64) -> Result<f64, GatewayError> {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return Err(GatewayError::Degenerate(format!("{p}")));
    }
    Ok(p)
}

fn yes_no_prompt(question: &str, context: &str) -> String {
    format!("{context}\n\n{question}\nAnswer with only \"yes\" or \"no\".")
}

/// First standalone "yes"/"no" word, case-insensitive. `true` means yes.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    text.split(|c: char| !c.is_alphanumeric())
        .find_map(|word| match word.to_ascii_lowercase().as_str() {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        })
}
