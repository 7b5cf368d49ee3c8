//! Chat completions against workers: OpenAI-compatible HTTP endpoints or
//! deterministic scripted mocks.
//!
//! Worker failure is a value, not a crash: every error variant carries a
//! worker label so the episode can record a failure sentinel and keep its
//! reward semantics total. Mock behavior is a pure function of (script,
//! messages, call seed), so concurrent execution cannot perturb results.

use crate::pool::{ReasoningBudget, ReasoningLevel, WorkerSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Registered mock scripts, keyed by the id in `mock:<id>` endpoints.
pub type MockRegistry = BTreeMap<String, MockScript>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// One completed chat call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    pub attempts: u32,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        (d.as_millis() as u64).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("{worker}: no messages to send")]
    EmptyMessages { worker: String },
    #[error("{worker}: last message must have role `user`")]
    LastMessageNotUser { worker: String },
    #[error("{worker}: unknown mock script `{script}`")]
    UnknownMock { worker: String, script: String },
    #[error("{worker}: credentials variable `{env}` is not set")]
    MissingCredentials { worker: String, env: String },
    #[error("{worker}: HTTP {status}: {body}")]
    Http {
        worker: String,
        status: u16,
        body: String,
    },
    #[error("{worker}: retries exhausted after {attempts} attempts: {last_error}")]
    RetriesExhausted {
        worker: String,
        attempts: u32,
        last_error: String,
    },
    #[error("{worker}: response is missing content")]
    MissingContent { worker: String },
    #[error("{worker}: malformed response: {reason}")]
    MalformedResponse { worker: String, reason: String },
}

/// Per-call knobs threaded through by the caller. The seed drives mock
/// sampling (and is forwarded as the `seed` field to HTTP providers);
/// the ordinal labels failures with the conductor-visible worker number.
#[derive(Debug, Clone, Copy, Default)]
pub struct CallOptions {
    pub seed: Option<u64>,
    pub worker_ordinal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Per-attempt request timeout.
    pub timeout: Duration,
    /// Retries after the initial attempt, for 429/5xx/transport errors.
    pub max_retries: u32,
    /// First backoff; doubles per retry (1 s, 2 s, 4 s by default).
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub retry: RetryPolicy,
    /// Global bound on in-flight completions across all threads.
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_in_flight: 16,
        }
    }
}

// ── Mock scripts ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchScope {
    /// Match against any message in the history.
    #[default]
    Any,
    /// Match against the last message only.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring the matched message content must contain. Empty matches
    /// everything.
    pub contains: String,
    #[serde(default)]
    pub scope: MatchScope,
    pub response: String,
    /// Probability that a matching rule fires; unset means always.
    #[serde(default)]
    pub success_probability: Option<f64>,
    #[serde(default)]
    pub delay_ms: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl MockRule {
    fn matches(&self, messages: &[ChatMessage]) -> bool {
        match self.scope {
            MatchScope::Any => messages.iter().any(|m| m.content.contains(&self.contains)),
            MatchScope::Last => messages
                .last()
                .is_some_and(|m| m.content.contains(&self.contains)),
        }
    }
}

/// Scripted worker: ordered rules with a mandatory default response.
///
/// Probabilistic rules draw from a hash of (script seed, rule seed, rule
/// index, call seed, message history), so a given call is deterministic
/// regardless of scheduling; varying the call seed varies the draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default_response: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub default_delay_ms: u64,
}

impl MockScript {
    pub fn constant(response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: response.into(),
            seed: 0,
            default_delay_ms: 0,
        }
    }

    /// Resolve the response for a message history. Returns the response
    /// text (after `{{last_message}}` substitution) and the delay to apply.
    pub fn respond(&self, messages: &[ChatMessage], call_seed: Option<u64>) -> (String, u64) {
        for (index, rule) in self.rules.iter().enumerate() {
            if !rule.matches(messages) {
                continue;
            }
            if let Some(p) = rule.success_probability {
                let draw = unit_interval(rule_draw_hash(self, rule, index, messages, call_seed));
                if draw >= p {
                    continue;
                }
            }
            let delay = rule.delay_ms.unwrap_or(self.default_delay_ms);
            return (substitute(&rule.response, messages), delay);
        }
        (
            substitute(&self.default_response, messages),
            self.default_delay_ms,
        )
    }
}

fn substitute(response: &str, messages: &[ChatMessage]) -> String {
    let mut out = response.to_string();
    if out.contains("{{last_message}}") {
        let last = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        out = out.replace("{{last_message}}", last);
    }
    if out.contains("{{last_assistant}}") {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        out = out.replace("{{last_assistant}}", last);
    }
    out
}

fn rule_draw_hash(
    script: &MockScript,
    rule: &MockRule,
    index: usize,
    messages: &[ChatMessage],
    call_seed: Option<u64>,
) -> u64 {
    let mut h = FNV_BASIS;
    for part in [
        script.seed,
        rule.seed.unwrap_or(0),
        index as u64,
        call_seed.unwrap_or(0),
    ] {
        h = fnv1a_bytes(h, &part.to_le_bytes());
    }
    for m in messages {
        h = fnv1a_bytes(h, &[m.role as u8 + 1]);
        h = fnv1a_bytes(h, m.content.as_bytes());
        h = fnv1a_bytes(h, &[0xFF]);
    }
    h
}

const FNV_BASIS: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a_bytes(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Map a hash to [0, 1) with 53-bit resolution.
fn unit_interval(hash: u64) -> f64 {
    (hash >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stable seed derivation for nested deterministic sampling (episode →
/// round → step). SplitMix64-based; pinned so runs reproduce across
/// machines.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ 0x9E37_79B9_7F4A_7C15);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── Semaphore ────────────────────────────────────────────────

/// Counting semaphore bounding total in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

pub struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().unwrap();
        *permits += 1;
        self.semaphore.cv.notify_one();
    }
}

// ── Client ───────────────────────────────────────────────────

/// Executes chat completions for both mock and HTTP workers. Reentrant;
/// safe to share across threads.
pub struct WorkerClient {
    mocks: MockRegistry,
    config: ClientConfig,
    semaphore: Semaphore,
    http: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl WorkerClient {
    pub fn new(mocks: MockRegistry, config: ClientConfig) -> Self {
        let semaphore = Semaphore::new(config.max_in_flight);
        Self {
            mocks,
            config,
            semaphore,
            http: reqwest::blocking::Client::new(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn mock_only(mocks: MockRegistry) -> Self {
        Self::new(mocks, ClientConfig::default())
    }

    /// Total completions dispatched (mock and HTTP), across all threads.
    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Run one chat completion. `messages` must be nonempty and end with
    /// a `user` turn. Inputs are never mutated; identical mock inputs and
    /// call seed produce identical outputs.
    pub fn complete(
        &self,
        worker: &WorkerSpec,
        messages: &[ChatMessage],
        opts: CallOptions,
    ) -> Result<CompletionResult, CompletionError> {
        let worker_label = label(worker, opts);
        if messages.is_empty() {
            return Err(CompletionError::EmptyMessages {
                worker: worker_label,
            });
        }
        if messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(CompletionError::LastMessageNotUser {
                worker: worker_label,
            });
        }
        let _permit = self.semaphore.acquire();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let start = Instant::now();
        match worker.mock_script_id() {
            Some(id) => self.complete_mock(worker, id, messages, opts, worker_label, start),
            None => self.complete_http(worker, messages, opts, worker_label, start),
        }
    }

    fn complete_mock(
        &self,
        _worker: &WorkerSpec,
        script_id: &str,
        messages: &[ChatMessage],
        opts: CallOptions,
        worker_label: String,
        start: Instant,
    ) -> Result<CompletionResult, CompletionError> {
        let script = self
            .mocks
            .get(script_id)
            .ok_or_else(|| CompletionError::UnknownMock {
                worker: worker_label,
                script: script_id.to_string(),
            })?;
        let (content, delay_ms) = script.respond(messages, opts.seed);
        if delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(delay_ms));
        }
        let prompt_tokens = messages.iter().map(|m| approx_tokens(&m.content)).sum();
        Ok(CompletionResult {
            completion_tokens: approx_tokens(&content),
            content,
            prompt_tokens,
            latency: start.elapsed(),
            attempts: 1,
        })
    }

    fn complete_http(
        &self,
        worker: &WorkerSpec,
        messages: &[ChatMessage],
        opts: CallOptions,
        worker_label: String,
        start: Instant,
    ) -> Result<CompletionResult, CompletionError> {
        let url = format!(
            "{}/chat/completions",
            worker.endpoint.trim_end_matches('/')
        );
        let token = match &worker.api_key_env {
            Some(env) => Some(std::env::var(env).map_err(|_| {
                CompletionError::MissingCredentials {
                    worker: worker_label.clone(),
                    env: env.clone(),
                }
            })?),
            None => None,
        };
        let body = build_request_body(worker, messages, opts.seed);

        let mut attempt = 0u32;
        let mut backoff = self.config.retry.backoff_base;
        loop {
            attempt += 1;
            let mut request = self
                .http
                .post(&url)
                .timeout(self.config.retry.timeout)
                .json(&body);
            if let Some(token) = &token {
                request = request.bearer_auth(token);
            }
            let last_error = match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return parse_chat_response(response, worker_label, messages, attempt, start);
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        format!("HTTP {}", status.as_u16())
                    } else {
                        let body = response.text().unwrap_or_default();
                        return Err(CompletionError::Http {
                            worker: worker_label,
                            status: status.as_u16(),
                            body: truncate(&body, 300),
                        });
                    }
                }
                Err(e) => e.to_string(),
            };
            if attempt > self.config.retry.max_retries {
                return Err(CompletionError::RetriesExhausted {
                    worker: worker_label,
                    attempts: attempt,
                    last_error,
                });
            }
            std::thread::sleep(backoff);
            backoff *= 2;
        }
    }
}

fn label(worker: &WorkerSpec, opts: CallOptions) -> String {
    match opts.worker_ordinal {
        Some(ordinal) => format!("model {ordinal}"),
        None => worker.name.clone(),
    }
}

/// Whitespace-token estimate used when a provider reports no usage and
/// for mock accounting.
fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}

fn build_request_body(
    worker: &WorkerSpec,
    messages: &[ChatMessage],
    seed: Option<u64>,
) -> serde_json::Value {
    let decoding = &worker.decoding;
    let mut body = serde_json::json!({
        "model": worker.model_identifier,
        "messages": messages,
        "temperature": decoding.temperature,
    });
    let map = body.as_object_mut().expect("object literal");
    let max_tokens_field = worker.max_tokens_field.as_deref().unwrap_or("max_tokens");
    map.insert(
        max_tokens_field.to_string(),
        serde_json::json!(decoding.max_completion_tokens),
    );
    if let Some(top_p) = decoding.top_p {
        map.insert("top_p".to_string(), serde_json::json!(top_p));
    }
    if let Some(top_k) = decoding.top_k {
        map.insert("top_k".to_string(), serde_json::json!(top_k));
    }
    if let Some(penalty) = decoding.presence_penalty {
        map.insert("presence_penalty".to_string(), serde_json::json!(penalty));
    }
    if let Some(seed) = seed {
        map.insert("seed".to_string(), serde_json::json!(seed));
    }
    if let Some(budget) = &decoding.reasoning_budget {
        let field = worker.reasoning_field.as_deref().unwrap_or("reasoning_effort");
        let value = match budget {
            ReasoningBudget::Tokens(n) => serde_json::json!(n),
            ReasoningBudget::Level(level) => serde_json::json!(match level {
                ReasoningLevel::Minimal => "minimal",
                ReasoningLevel::Medium => "medium",
                ReasoningLevel::High => "high",
                ReasoningLevel::Disabled => "disabled",
            }),
        };
        map.insert(field.to_string(), value);
    }
    body
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn parse_chat_response(
    response: reqwest::blocking::Response,
    worker_label: String,
    messages: &[ChatMessage],
    attempts: u32,
    start: Instant,
) -> Result<CompletionResult, CompletionError> {
    let parsed: ChatResponse =
        response
            .json()
            .map_err(|e| CompletionError::MalformedResponse {
                worker: worker_label.clone(),
                reason: e.to_string(),
            })?;
    let content = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or(CompletionError::MissingContent {
            worker: worker_label,
        })?;
    let usage = parsed.usage.unwrap_or_default();
    let prompt_tokens = if usage.prompt_tokens > 0 {
        usage.prompt_tokens
    } else {
        messages.iter().map(|m| approx_tokens(&m.content)).sum()
    };
    let completion_tokens = if usage.completion_tokens > 0 {
        usage.completion_tokens
    } else {
        approx_tokens(&content)
    };
    Ok(CompletionResult {
        content,
        prompt_tokens,
        completion_tokens,
        latency: start.elapsed(),
        attempts,
    })
}
