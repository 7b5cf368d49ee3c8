//! Plan execution and the episode recursion loop.
//!
//! Steps form a DAG derived from their access specs (`all` depends on
//! every earlier step, an index list on exactly those steps, an empty
//! list on nothing). A step runs as soon as its dependencies complete,
//! so independent steps of a tree topology overlap in time; records are
//! kept in plan order regardless of completion order, and with
//! deterministic mocks the trace content is identical under sequential
//! and concurrent scheduling.
//!
//! A failed worker call never aborts the episode: the step's response
//! becomes a fixed failure sentinel, downstream steps see the sentinel,
//! and reward semantics stay total.

use crate::client::{
    derive_seed, CallOptions, ChatMessage, CompletionError, CompletionResult, WorkerClient,
};
use crate::plan::{
    parse_conductor_output, validate_plan, ParseOutcome, PlanViolation, WorkflowPlan, WorkflowStep,
    DEFAULT_MAX_STEPS,
};
use crate::pool::{AgentPool, WorkerSpec};
use crate::prompt::{
    build_conductor_prompt, build_recursion_prompt, build_step_messages, PriorStep, PromptBundle,
    PromptError,
};
use serde::{Deserialize, Serialize};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Response text recorded for a failed step; chosen so no verifier can
/// accidentally match it.
pub fn failure_sentinel(ordinal: usize) -> String {
    format!("[[WORKER_FAILURE: model {ordinal}]]")
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("plan is invalid: {}", format_violations(.0))]
    InvalidPlan(Vec<PlanViolation>),
    #[error("cannot execute an empty plan")]
    EmptyPlan,
    #[error("conductor call failed: {0}")]
    ConductorCall(CompletionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn format_violations(violations: &[PlanViolation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Outcome of one step's worker call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepResult {
    Completed(CompletionResult),
    Failed { error: String, sentinel: String },
}

impl StepResult {
    /// What downstream steps (and the final answer) see.
    pub fn response_text(&self) -> &str {
        match self {
            StepResult::Completed(result) => &result.content,
            StepResult::Failed { sentinel, .. } => sentinel,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, StepResult::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: WorkflowStep,
    /// Exactly the messages sent to the worker, reflecting the access
    /// spec at execution time.
    pub messages: Vec<ChatMessage>,
    pub result: StepResult,
    /// Offsets from trace start, milliseconds.
    pub started_ms: u64,
    pub finished_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub plan: WorkflowPlan,
    pub records: Vec<StepRecord>,
    pub final_response: String,
    /// Prompt + completion tokens summed over completed steps.
    pub total_tokens: u64,
    pub wall_time_ms: u64,
}

/// The previous round's final routing message (subtask and response),
/// visible to `all`-access steps in recursion rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviousFinal {
    pub subtask: String,
    pub response: String,
}

/// Knobs for a single plan execution.
#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub seed: u64,
    /// Recursion round index, folded into per-step call seeds.
    pub round: u64,
    /// Force single-threaded, in-order execution.
    pub sequential: bool,
    pub max_steps: usize,
    /// Episode wall-clock cutoff; steps starting after it fail with the
    /// sentinel instead of calling their worker.
    pub deadline: Option<Instant>,
    pub previous_final: Option<PreviousFinal>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            round: 0,
            sequential: false,
            max_steps: DEFAULT_MAX_STEPS,
            deadline: None,
            previous_final: None,
        }
    }
}

/// Execute a plan against the pool's active workers.
///
/// The plan is validated first; an invalid plan is rejected before any
/// worker call. Step call seeds derive from (seed, round, step index),
/// so trace content is independent of scheduling.
pub fn execute_plan(
    client: &WorkerClient,
    pool: &AgentPool,
    plan: &WorkflowPlan,
    question: &str,
    opts: &ExecOptions,
) -> Result<ExecutionTrace, EngineError> {
    if plan.is_empty() {
        return Err(EngineError::EmptyPlan);
    }
    let violations = validate_plan(plan, pool.active_len(), opts.max_steps);
    if !violations.is_empty() {
        return Err(EngineError::InvalidPlan(violations));
    }

    let started = Instant::now();
    let n = plan.len();
    let slots: Mutex<Vec<Option<StepRecord>>> = Mutex::new((0..n).map(|_| None).collect());
    let done = Condvar::new();

    let run_step = |index: usize| -> StepRecord {
        let step = &plan.steps[index];
        let deps = step.access.resolved_positions(index);
        // Snapshot (subtask, response) pairs of earlier steps once all
        // dependencies have published. Dependencies point strictly
        // backwards, so this cannot deadlock.
        let prior_owned: Vec<Option<(String, String)>> = {
            let mut guard = slots.lock().unwrap();
            while !deps.iter().all(|&d| guard[d].is_some()) {
                guard = done.wait(guard).unwrap();
            }
            guard[..index]
                .iter()
                .map(|slot| {
                    slot.as_ref()
                        .map(|r| (r.step.subtask.clone(), r.result.response_text().to_string()))
                })
                .collect()
        };
        let prior: Vec<Option<PriorStep<'_>>> = prior_owned
            .iter()
            .map(|slot| {
                slot.as_ref().map(|(subtask, response)| PriorStep {
                    subtask,
                    response,
                })
            })
            .collect();
        let previous = opts.previous_final.as_ref().map(|p| PriorStep {
            subtask: &p.subtask,
            response: &p.response,
        });

        let started_ms = started.elapsed().as_millis() as u64;
        let (messages, result) = match build_step_messages(question, step, &prior, previous) {
            Ok(messages) => {
                let over_deadline = opts.deadline.is_some_and(|d| Instant::now() >= d);
                let result = if over_deadline {
                    StepResult::Failed {
                        error: "episode wall-clock budget exceeded".to_string(),
                        sentinel: failure_sentinel(step.worker_ordinal),
                    }
                } else {
                    let worker = pool
                        .worker_for_ordinal(step.worker_ordinal)
                        .expect("plan validated against pool");
                    let call = CallOptions {
                        seed: Some(derive_seed(opts.seed, &[1, opts.round, index as u64])),
                        worker_ordinal: Some(step.worker_ordinal),
                    };
                    match client.complete(worker, &messages, call) {
                        Ok(result) => StepResult::Completed(result),
                        Err(e) => StepResult::Failed {
                            error: e.to_string(),
                            sentinel: failure_sentinel(step.worker_ordinal),
                        },
                    }
                };
                (messages, result)
            }
            Err(e) => (
                Vec::new(),
                StepResult::Failed {
                    error: e.to_string(),
                    sentinel: failure_sentinel(step.worker_ordinal),
                },
            ),
        };
        StepRecord {
            step: step.clone(),
            messages,
            result,
            started_ms,
            finished_ms: started.elapsed().as_millis() as u64,
        }
    };

    let publish = |index: usize, record: StepRecord| {
        let mut guard = slots.lock().unwrap();
        guard[index] = Some(record);
        done.notify_all();
    };

    if opts.sequential {
        for index in 0..n {
            let record = run_step(index);
            publish(index, record);
        }
    } else {
        std::thread::scope(|scope| {
            for index in 0..n {
                let run_step = &run_step;
                let publish = &publish;
                scope.spawn(move || publish(index, run_step(index)));
            }
        });
    }

    let records: Vec<StepRecord> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("all steps publish"))
        .collect();
    let final_response = records
        .last()
        .expect("plan is nonempty")
        .result
        .response_text()
        .to_string();
    let total_tokens = records
        .iter()
        .filter_map(|r| match &r.result {
            StepResult::Completed(c) => Some(c.prompt_tokens + c.completion_tokens),
            StepResult::Failed { .. } => None,
        })
        .sum();
    Ok(ExecutionTrace {
        plan: plan.clone(),
        records,
        final_response,
        total_tokens,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}

// ── Episodes ─────────────────────────────────────────────────

/// How a conductor round ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundDisposition {
    /// A nonempty valid plan was executed.
    Executed,
    /// An empty plan in a recursion round: return the previous response.
    EmptyTermination,
    /// Round 0 produced no executable plan; the episode has no answer.
    FormatFailure,
    /// A recursion round produced no executable plan; the previous final
    /// response stands.
    FormatFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub parse: ParseOutcome,
    /// Violations against the active pool, when the plan parsed but could
    /// not be executed.
    pub violations: Vec<PlanViolation>,
    pub disposition: RoundDisposition,
    pub trace: Option<ExecutionTrace>,
}

/// Full record of one episode: every conductor round with its parse
/// outcome and trace, plus the final response returned to the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub question: String,
    /// The round-0 conductor prompt.
    pub prompt: String,
    pub rounds: Vec<RoundRecord>,
    /// Absent only on round-0 format failure.
    pub final_response: Option<String>,
    pub format_failure: bool,
    pub conductor_calls: u32,
    /// Conductor plus worker tokens across all rounds.
    pub total_tokens: u64,
    pub wall_time_ms: u64,
}

impl EpisodeRecord {
    /// The round-0 conductor completion text.
    pub fn conductor_completion(&self) -> &str {
        self.rounds
            .first()
            .map(|r| r.parse.raw_text.as_str())
            .unwrap_or("")
    }

    pub fn steps_executed(&self) -> usize {
        self.rounds
            .iter()
            .filter_map(|r| r.trace.as_ref())
            .map(|t| t.records.len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOptions {
    pub max_steps: usize,
    pub max_recursions: u32,
    pub fine_grained: bool,
    pub seed: u64,
    pub sequential: bool,
    pub episode_budget: Option<Duration>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            max_recursions: 0,
            fine_grained: false,
            seed: 0,
            sequential: false,
            episode_budget: Some(Duration::from_secs(15 * 60)),
        }
    }
}

/// Run one episode: prompt the conductor, execute its plan, and drive
/// the recursion loop.
///
/// Round 0 must yield a nonempty valid plan, otherwise the episode ends
/// flagged as a format failure. While rounds remain, the previous
/// round's final response is fed back through the recursion prompt; an
/// empty plan terminates and returns that response verbatim, and a
/// recursion round that fails to parse falls back to it. The conductor
/// conversation is cumulative across rounds. Conductor invocations never
/// exceed `max_recursions + 1`.
pub fn run_episode(
    client: &WorkerClient,
    conductor: &WorkerSpec,
    pool: &AgentPool,
    question: &str,
    prompts: &PromptBundle,
    opts: &EpisodeOptions,
) -> Result<EpisodeRecord, EngineError> {
    let started = Instant::now();
    let deadline = opts.episode_budget.map(|budget| started + budget);
    let prompt =
        build_conductor_prompt(&prompts.conductor, &prompts.few_shot, question, pool, opts.max_steps)?;
    let mut conversation = vec![ChatMessage::user(prompt.clone())];
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut conductor_calls = 0u32;
    let mut total_tokens = 0u64;
    let mut final_response: Option<String> = None;
    let mut final_subtask: Option<String> = None;
    let mut format_failure = false;

    for round in 0..=u64::from(opts.max_recursions) {
        if round > 0 {
            let previous = final_response.as_deref().expect("set by executed round");
            let recursion_prompt =
                build_recursion_prompt(&prompts.recursion, previous, opts.max_steps)?;
            conversation.push(ChatMessage::user(recursion_prompt));
        }
        let call = CallOptions {
            seed: Some(derive_seed(opts.seed, &[0, round])),
            worker_ordinal: None,
        };
        let completion = client
            .complete(conductor, &conversation, call)
            .map_err(EngineError::ConductorCall)?;
        conductor_calls += 1;
        total_tokens += completion.prompt_tokens + completion.completion_tokens;
        conversation.push(ChatMessage::assistant(completion.content.clone()));

        let parse = parse_conductor_output(&completion.content, opts.max_steps, opts.fine_grained);
        let (plan, violations) = match &parse.plan {
            Some(plan) => {
                let violations = validate_plan(plan, pool.active_len(), opts.max_steps);
                if violations.is_empty() {
                    (Some(plan.clone()), Vec::new())
                } else {
                    (None, violations)
                }
            }
            None => (None, Vec::new()),
        };

        match plan {
            Some(plan) if plan.is_empty() && round > 0 => {
                rounds.push(RoundRecord {
                    parse,
                    violations,
                    disposition: RoundDisposition::EmptyTermination,
                    trace: None,
                });
                break;
            }
            Some(plan) if !plan.is_empty() => {
                let exec = ExecOptions {
                    seed: opts.seed,
                    round,
                    sequential: opts.sequential,
                    max_steps: opts.max_steps,
                    deadline,
                    previous_final: final_subtask.clone().zip(final_response.clone()).map(
                        |(subtask, response)| PreviousFinal { subtask, response },
                    ),
                };
                let trace = execute_plan(client, pool, &plan, question, &exec)?;
                total_tokens += trace.total_tokens;
                final_response = Some(trace.final_response.clone());
                final_subtask = plan.steps.last().map(|s| s.subtask.clone());
                rounds.push(RoundRecord {
                    parse,
                    violations,
                    disposition: RoundDisposition::Executed,
                    trace: Some(trace),
                });
            }
            // No executable plan: empty in round 0, invalid, or unparseable.
            _ => {
                let disposition = if round == 0 {
                    format_failure = true;
                    RoundDisposition::FormatFailure
                } else {
                    RoundDisposition::FormatFallback
                };
                rounds.push(RoundRecord {
                    parse,
                    violations,
                    disposition,
                    trace: None,
                });
                break;
            }
        }
    }

    Ok(EpisodeRecord {
        question: question.to_string(),
        prompt,
        rounds,
        final_response,
        format_failure,
        conductor_calls,
        total_tokens,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}
