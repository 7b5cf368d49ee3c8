//! Worker pool configuration and ordinal anonymization.
//!
//! A pool file declares the worker agents (endpoint, decoding parameters,
//! conductor-visible metadata), an optional conductor entry, and any mock
//! scripts referenced by `mock:<id>` endpoints. Workers are presented to
//! the conductor as bare ordinals ("Model 0", "Model 1", ...) so that
//! selection is driven by the metadata capability tags, not vendor names.

use crate::client::{MockRegistry, MockScript};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pool config is malformed: {0}")]
    Malformed(#[from] toml::de::Error),
    #[error("pool config declares no workers")]
    NoWorkers,
    #[error("worker `{worker}` is missing the `{field}` field")]
    MissingField { worker: String, field: String },
    #[error("duplicate worker name `{0}`")]
    DuplicateName(String),
    #[error("worker `{worker}`: endpoint `{endpoint}` is neither a valid URL nor a registered mock id")]
    BadEndpoint { worker: String, endpoint: String },
    #[error("subset size {k} is out of range for a pool of {n}")]
    SubsetSize { k: usize, n: usize },
    #[error("decoding parameters for `{worker}` are invalid: {reason}")]
    BadDecoding { worker: String, reason: String },
}

/// Reasoning budget for providers that expose one; the wire field name is
/// per-worker (`reasoning_field` in the pool file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, rename_all = "lowercase")]
pub enum ReasoningBudget {
    Tokens(u64),
    Level(ReasoningLevel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningLevel {
    Minimal,
    Medium,
    High,
    Disabled,
}

/// Sampling parameters sent with every completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_completion_tokens: u64,
    pub reasoning_budget: Option<ReasoningBudget>,
    pub top_p: Option<f64>,
    pub top_k: Option<u64>,
    pub presence_penalty: Option<f64>,
}

impl Default for DecodingParams {
    /// Worker defaults: temperature 0.2, 4096 max completion tokens.
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_completion_tokens: 4096,
            reasoning_budget: None,
            top_p: None,
            top_k: None,
            presence_penalty: None,
        }
    }
}

impl DecodingParams {
    /// Conductor defaults: temperature 1.0, 1024 max completion tokens.
    pub fn conductor_default() -> Self {
        Self {
            temperature: 1.0,
            max_completion_tokens: 1024,
            ..Self::default()
        }
    }

    fn validate(&self, worker: &str) -> Result<(), PoolError> {
        let fail = |reason: &str| PoolError::BadDecoding {
            worker: worker.to_string(),
            reason: reason.to_string(),
        };
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(fail("temperature must be >= 0"));
        }
        if self.max_completion_tokens < 1 {
            return Err(fail("max_completion_tokens must be >= 1"));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(fail("top_p must be in (0, 1]"));
            }
        }
        if self.top_k == Some(0) {
            return Err(fail("top_k must be >= 1"));
        }
        Ok(())
    }
}

/// One worker agent: where to reach it and how to decode from it.
///
/// `name` is internal only; `metadata` is the capability description the
/// conductor sees next to the worker's ordinal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub name: String,
    /// `https://...` base URL or `mock:<script-id>`.
    pub endpoint: String,
    /// Model name sent on the wire.
    pub model_identifier: String,
    #[serde(default)]
    pub metadata: String,
    #[serde(default)]
    pub decoding: DecodingParams,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Provider field name for the reasoning budget (default
    /// `reasoning_effort`).
    #[serde(default)]
    pub reasoning_field: Option<String>,
    /// Provider alias for `max_tokens`, if it uses one.
    #[serde(default)]
    pub max_tokens_field: Option<String>,
}

impl WorkerSpec {
    pub fn mock_script_id(&self) -> Option<&str> {
        self.endpoint.strip_prefix("mock:")
    }

    pub fn is_mock(&self) -> bool {
        self.mock_script_id().is_some()
    }
}

/// The worker pool plus the active subset exposed to the conductor.
///
/// Conductor-visible ordinals `0..k-1` map onto `active` in order; the
/// pool is immutable after load and subsetting returns a new value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentPool {
    workers: Vec<WorkerSpec>,
    active: Vec<usize>,
}

impl AgentPool {
    pub fn new(workers: Vec<WorkerSpec>) -> Self {
        let active = (0..workers.len()).collect();
        Self { workers, active }
    }

    pub fn total_len(&self) -> usize {
        self.workers.len()
    }

    /// Number of active workers, i.e. the ordinal space the conductor sees.
    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    /// Base-pool positions of the active subset, ascending.
    pub fn active_positions(&self) -> &[usize] {
        &self.active
    }

    /// Worker behind a conductor-visible ordinal.
    pub fn worker_for_ordinal(&self, ordinal: usize) -> Option<&WorkerSpec> {
        self.active.get(ordinal).map(|&p| &self.workers[p])
    }

    pub fn active_workers(&self) -> impl Iterator<Item = &WorkerSpec> {
        self.active.iter().map(|&p| &self.workers[p])
    }

    /// Uniformly random `k`-subset of the base pool, order-preserving and
    /// deterministic for a given seed (partial Fisher-Yates over base
    /// positions, driven by `ChaCha8Rng::seed_from_u64(seed)`).
    pub fn sample_subset(&self, k: usize, seed: u64) -> Result<AgentPool, PoolError> {
        let n = self.workers.len();
        if k < 1 || k > n {
            return Err(PoolError::SubsetSize { k, n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.gen_range(0..n - i);
            positions.swap(i, j);
        }
        let mut active = positions[..k].to_vec();
        active.sort_unstable();
        Ok(AgentPool {
            workers: self.workers.clone(),
            active,
        })
    }
}

/// Render the active workers for the conductor prompt, one line per
/// worker: `Model <ordinal>: <metadata>`.
pub fn describe_pool(pool: &AgentPool) -> String {
    pool.active_workers()
        .enumerate()
        .map(|(ordinal, w)| {
            if w.metadata.is_empty() {
                format!("Model {ordinal}:")
            } else {
                format!("Model {ordinal}: {}", w.metadata)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

// ── Pool file loading ────────────────────────────────────────

/// Everything a pool file declares.
#[derive(Debug, Clone)]
pub struct PoolSetup {
    pub pool: AgentPool,
    pub conductor: Option<WorkerSpec>,
    pub mocks: MockRegistry,
}

#[derive(Debug, Deserialize)]
struct PoolFile {
    #[serde(default)]
    conductor: Option<RawWorker>,
    #[serde(default)]
    workers: Vec<RawWorker>,
    #[serde(default)]
    mock_scripts: std::collections::BTreeMap<String, MockScript>,
}

/// Worker entry with optional fields so load errors can name the worker
/// instead of surfacing a bare deserialization failure.
#[derive(Debug, Deserialize)]
struct RawWorker {
    name: String,
    endpoint: Option<String>,
    model_identifier: Option<String>,
    #[serde(default)]
    metadata: String,
    #[serde(default)]
    decoding: Option<DecodingParams>,
    #[serde(default)]
    api_key_env: Option<String>,
    #[serde(default)]
    reasoning_field: Option<String>,
    #[serde(default)]
    max_tokens_field: Option<String>,
}

impl RawWorker {
    fn into_spec(self, default_decoding: DecodingParams, mocks: &MockRegistry) -> Result<WorkerSpec, PoolError> {
        let missing = |field: &str| PoolError::MissingField {
            worker: self.name.clone(),
            field: field.to_string(),
        };
        let endpoint = self.endpoint.clone().ok_or_else(|| missing("endpoint"))?;
        let model_identifier = self
            .model_identifier
            .clone()
            .ok_or_else(|| missing("model_identifier"))?;
        let decoding = self.decoding.unwrap_or(default_decoding);
        decoding.validate(&self.name)?;
        let spec = WorkerSpec {
            name: self.name,
            endpoint,
            model_identifier,
            metadata: self.metadata,
            decoding,
            api_key_env: self.api_key_env,
            reasoning_field: self.reasoning_field,
            max_tokens_field: self.max_tokens_field,
        };
        validate_endpoint(&spec, mocks)?;
        Ok(spec)
    }
}

fn validate_endpoint(spec: &WorkerSpec, mocks: &MockRegistry) -> Result<(), PoolError> {
    let bad = || PoolError::BadEndpoint {
        worker: spec.name.clone(),
        endpoint: spec.endpoint.clone(),
    };
    if let Some(id) = spec.mock_script_id() {
        if !mocks.contains_key(id) {
            return Err(bad());
        }
        return Ok(());
    }
    let url = url::Url::parse(&spec.endpoint).map_err(|_| bad())?;
    if !matches!(url.scheme(), "http" | "https") {
        return Err(bad());
    }
    Ok(())
}

/// Load a pool configuration document (TOML). Workers keep file order and
/// all start active.
pub fn load_pool(config: &str) -> Result<PoolSetup, PoolError> {
    let file: PoolFile = toml::from_str(config)?;
    if file.workers.is_empty() {
        return Err(PoolError::NoWorkers);
    }
    let mocks: MockRegistry = file.mock_scripts.into_iter().collect();
    let mut names = BTreeSet::new();
    let mut workers = Vec::with_capacity(file.workers.len());
    for raw in file.workers {
        if !names.insert(raw.name.clone()) {
            return Err(PoolError::DuplicateName(raw.name));
        }
        workers.push(raw.into_spec(DecodingParams::default(), &mocks)?);
    }
    let conductor = file
        .conductor
        .map(|raw| raw.into_spec(DecodingParams::conductor_default(), &mocks))
        .transpose()?;
    Ok(PoolSetup {
        pool: AgentPool::new(workers),
        conductor,
        mocks,
    })
}
