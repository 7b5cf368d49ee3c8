//! Runtime for conductor-style multi-LLM coordination.
//!
//! A *conductor* model answers questions indirectly: it emits a workflow
//! plan — a sequence of (worker ordinal, subtask, access list) steps —
//! which this runtime parses, validates, and executes against a pool of
//! worker agents (OpenAI-compatible HTTP endpoints or deterministic
//! mocks). The final worker response is scored against a reference
//! solution, and rewards feed GRPO-style group advantage computation for
//! training-data collection.
//!
//! Module map:
//! - [`plan`]: the three-list plan surface syntax (parse / validate / render)
//! - [`pool`]: worker pool configuration, subset sampling, ordinal anonymization
//! - [`client`]: chat completions against HTTP workers or scripted mocks
//! - [`prompt`]: conductor / recursion prompts and per-step message assembly
//! - [`engine`]: dependency-aware plan execution and the recursion loop
//! - [`reward`]: answer extraction, verification, and reward schemas
//! - [`grpo`]: group advantages, clipped surrogate objective, toy policy training
//! - [`harness`]: batch rollout collection, evaluation baselines, export

pub mod client;
pub mod engine;
pub mod grpo;
pub mod harness;
pub mod plan;
pub mod pool;
pub mod prompt;
pub mod reward;
