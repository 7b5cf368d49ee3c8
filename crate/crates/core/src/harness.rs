//! Batch rollout collection for training-data export and the evaluation
//! harness with repeated trials and baseline strategies.
//!
//! Episodes within a batch run concurrently on a worker-thread pool, but
//! every per-episode seed derives from (batch seed, question, rollout
//! index), and results are written back by index, so collection against
//! mock workers is byte-for-byte reproducible regardless of scheduling.

use crate::client::{derive_seed, CallOptions, ChatMessage, WorkerClient};
use crate::engine::{run_episode, EngineError, EpisodeOptions, EpisodeRecord};
use crate::grpo::{GrpoConfig, GrpoError, RolloutGroup};
use crate::pool::{AgentPool, WorkerSpec};
use crate::prompt::PromptBundle;
use crate::reward::{
    extract_answer, reward_from_flags, score_episode, verify, RewardSchema, RewardValue,
    TaskSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

/// Follow-up turn used by the self-reflection baseline.
pub const REFLECTION_PROMPT: &str = "Review your previous attempts, identify any mistakes, and provide an improved final answer to the original question.";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("questions_per_iter must be >= 1")]
    NoQuestions,
    #[error("questions_per_iter {requested} exceeds dataset size {available}")]
    TooManyQuestions { requested: usize, available: usize },
    #[error("trials must be >= 1")]
    NoTrials,
    #[error("worker ordinal {0} is not in the active pool")]
    UnknownOrdinal(usize),
    #[error("strategy requires a conductor entry in the pool file")]
    MissingConductor,
    #[error("conductor unreachable for every rollout of question `{question_id}`: {last_error}")]
    ConductorUnreachable {
        question_id: String,
        last_error: String,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("export line {line} is malformed: {reason}")]
    MalformedExport { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

/// Run `f(0..count)` on a bounded worker pool, collecting results in
/// index order.
fn parallel_map<T, F>(count: usize, concurrency: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    let cursor = AtomicUsize::new(0);
    let workers = concurrency.clamp(1, count.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::Relaxed);
                if index >= count {
                    break;
                }
                let value = f(index);
                results.lock().unwrap()[index] = Some(value);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("worker filled every slot"))
        .collect()
}

// ── Rollout collection ───────────────────────────────────────

/// One rollout of a group: the episode (when it ran) and its reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedEpisode {
    pub rollout_index: usize,
    pub episode: Option<EpisodeRecord>,
    /// Episode-level failure (e.g. conductor unreachable), scored as the
    /// schema's failure value.
    pub error: Option<String>,
    pub reward: RewardValue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub iteration: u64,
    pub questions: Vec<TaskSample>,
    pub groups: Vec<RolloutGroup<CollectedEpisode>>,
}

impl RolloutBatch {
    pub fn episodes(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub questions_per_iter: usize,
    pub iteration: u64,
    pub seed: u64,
    pub schema: RewardSchema,
    pub episode: EpisodeOptions,
    /// Episode-level worker threads (the client's semaphore still bounds
    /// actual in-flight requests).
    pub concurrency: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            questions_per_iter: 4,
            iteration: 0,
            seed: 0,
            schema: RewardSchema::Conductor,
            episode: EpisodeOptions::default(),
            concurrency: 16,
        }
    }
}

/// Seeded draw of `k` distinct indices from `0..n`, ascending.
fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.gen_range(0..n - i);
        indices.swap(i, j);
    }
    let mut chosen = indices[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Collect one iteration's rollout batch: `questions_per_iter` questions
/// sampled without replacement, G episodes each, scored and normalized
/// into group advantages. Episode errors score as the schema's failure
/// value; only a group whose every rollout failed to reach the conductor
/// aborts the batch.
pub fn collect_rollouts(
    client: &WorkerClient,
    conductor: &WorkerSpec,
    pool: &AgentPool,
    prompts: &PromptBundle,
    dataset: &[TaskSample],
    config: &GrpoConfig,
    opts: &RolloutOptions,
) -> Result<RolloutBatch, HarnessError> {
    if dataset.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if opts.questions_per_iter == 0 {
        return Err(HarnessError::NoQuestions);
    }
    if opts.questions_per_iter > dataset.len() {
        return Err(HarnessError::TooManyQuestions {
            requested: opts.questions_per_iter,
            available: dataset.len(),
        });
    }

    let question_indices = sample_indices(
        dataset.len(),
        opts.questions_per_iter,
        derive_seed(opts.seed, &[5, opts.iteration]),
    );
    let questions: Vec<TaskSample> = question_indices
        .iter()
        .map(|&i| dataset[i].clone())
        .collect();

    let group_size = config.group_size;
    let total = questions.len() * group_size;
    let outcomes: Vec<Result<EpisodeRecord, EngineError>> =
        parallel_map(total, opts.concurrency, |job| {
            let group = job / group_size;
            let rollout = job % group_size;
            let episode_opts = EpisodeOptions {
                seed: derive_seed(
                    opts.seed,
                    &[2, opts.iteration, group as u64, rollout as u64],
                ),
                ..opts.episode.clone()
            };
            run_episode(
                client,
                conductor,
                pool,
                &questions[group].question,
                prompts,
                &episode_opts,
            )
        });

    let mut groups = Vec::with_capacity(questions.len());
    for (g, sample) in questions.iter().enumerate() {
        let group_outcomes = &outcomes[g * group_size..(g + 1) * group_size];
        let all_conductor_failures = group_outcomes
            .iter()
            .all(|r| matches!(r, Err(EngineError::ConductorCall(_))));
        if all_conductor_failures {
            let last_error = group_outcomes
                .iter()
                .rev()
                .find_map(|r| r.as_ref().err().map(ToString::to_string))
                .unwrap_or_default();
            return Err(HarnessError::ConductorUnreachable {
                question_id: sample.id.clone(),
                last_error,
            });
        }
        let mut rewards = Vec::with_capacity(group_size);
        let mut completions = Vec::with_capacity(group_size);
        for (i, outcome) in group_outcomes.iter().enumerate() {
            let (episode, error, reward) = match outcome {
                Ok(episode) => {
                    let reward = score_episode(episode, sample, opts.schema);
                    (Some(episode.clone()), None, reward)
                }
                Err(e) => (
                    None,
                    Some(e.to_string()),
                    reward_from_flags(false, false, opts.schema),
                ),
            };
            rewards.push(reward.value);
            completions.push(CollectedEpisode {
                rollout_index: i,
                episode,
                error,
                reward,
            });
        }
        groups.push(RolloutGroup::new(
            sample.id.clone(),
            rewards,
            completions,
            config.std_epsilon,
        )?);
    }

    Ok(RolloutBatch {
        iteration: opts.iteration,
        questions,
        groups,
    })
}

// ── Evaluation ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    Conductor,
    SingleWorker { ordinal: usize },
    SelfReflection { ordinal: usize, turns: u32 },
    Consensus { ordinal: usize, k: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_name: String,
    pub trials: u32,
    pub per_trial_accuracy: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of trial accuracies over sqrt(trials);
    /// 0 for a single trial.
    pub stderr: f64,
    pub total_tokens: u64,
    pub total_calls: u64,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub task_name: String,
    pub trials: u32,
    pub seed: u64,
    pub episode: EpisodeOptions,
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            task_name: "dataset".to_string(),
            trials: 16,
            seed: 0,
            episode: EpisodeOptions::default(),
            concurrency: 16,
        }
    }
}

struct SampleOutcome {
    correct: bool,
    tokens: u64,
    calls: u64,
}

/// Modal vote with ties broken by sampling order (the earliest-seen
/// answer among those tied for the highest count wins).
pub fn modal_answer(votes: &[Option<String>]) -> Option<String> {
    let mut tally: Vec<(&str, usize)> = Vec::new();
    for vote in votes.iter().flatten() {
        match tally.iter_mut().find(|(answer, _)| *answer == vote) {
            Some((_, count)) => *count += 1,
            None => tally.push((vote, 1)),
        }
    }
    let mut best: Option<(&str, usize)> = None;
    for (answer, count) in tally {
        if best.is_none_or(|(_, best_count)| count > best_count) {
            best = Some((answer, count));
        }
    }
    best.map(|(answer, _)| answer.to_string())
}

/// Mean and standard error of per-trial accuracies.
pub fn mean_and_stderr(per_trial: &[f64]) -> (f64, f64) {
    let n = per_trial.len();
    let mean = per_trial.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let sample_variance =
        per_trial.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, sample_variance.sqrt() / (n as f64).sqrt())
}

/// Evaluate a strategy over the dataset with repeated trials.
pub fn evaluate(
    client: &WorkerClient,
    strategy: &Strategy,
    dataset: &[TaskSample],
    pool: &AgentPool,
    conductor: Option<&WorkerSpec>,
    prompts: &PromptBundle,
    opts: &EvalOptions,
) -> Result<EvalReport, HarnessError> {
    if dataset.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if opts.trials == 0 {
        return Err(HarnessError::NoTrials);
    }
    let ordinal = match strategy {
        Strategy::Conductor => {
            if conductor.is_none() {
                return Err(HarnessError::MissingConductor);
            }
            None
        }
        Strategy::SingleWorker { ordinal }
        | Strategy::SelfReflection { ordinal, .. }
        | Strategy::Consensus { ordinal, .. } => Some(*ordinal),
    };
    if let Some(ordinal) = ordinal {
        if pool.worker_for_ordinal(ordinal).is_none() {
            return Err(HarnessError::UnknownOrdinal(ordinal));
        }
    }

    let trials = opts.trials as usize;
    let total = trials * dataset.len();
    let outcomes: Vec<SampleOutcome> = parallel_map(total, opts.concurrency, |job| {
        let trial = job / dataset.len();
        let sample_index = job % dataset.len();
        let sample = &dataset[sample_index];
        let job_seed = derive_seed(opts.seed, &[7, trial as u64, sample_index as u64]);
        run_strategy(client, strategy, sample, pool, conductor, &opts.episode, prompts, job_seed)
    });

    let mut per_trial_accuracy = Vec::with_capacity(trials);
    for trial in 0..trials {
        let correct = outcomes[trial * dataset.len()..(trial + 1) * dataset.len()]
            .iter()
            .filter(|o| o.correct)
            .count();
        per_trial_accuracy.push(correct as f64 / dataset.len() as f64);
    }
    let (mean, stderr) = mean_and_stderr(&per_trial_accuracy);
    Ok(EvalReport {
        task_name: opts.task_name.clone(),
        trials: opts.trials,
        per_trial_accuracy,
        mean,
        stderr,
        total_tokens: outcomes.iter().map(|o| o.tokens).sum(),
        total_calls: outcomes.iter().map(|o| o.calls).sum(),
    })
}

fn run_strategy(
    client: &WorkerClient,
    strategy: &Strategy,
    sample: &TaskSample,
    pool: &AgentPool,
    conductor: Option<&WorkerSpec>,
    episode_opts: &EpisodeOptions,
    prompts: &PromptBundle,
    job_seed: u64,
) -> SampleOutcome {
    match strategy {
        Strategy::Conductor => {
            let opts = EpisodeOptions {
                seed: job_seed,
                ..episode_opts.clone()
            };
            match run_episode(
                client,
                conductor.expect("checked by evaluate"),
                pool,
                &sample.question,
                prompts,
                &opts,
            ) {
                Ok(episode) => {
                    let reward = score_episode(&episode, sample, RewardSchema::Conductor);
                    SampleOutcome {
                        correct: reward.matched,
                        tokens: episode.total_tokens,
                        calls: u64::from(episode.conductor_calls)
                            + episode.steps_executed() as u64,
                    }
                }
                Err(_) => SampleOutcome {
                    correct: false,
                    tokens: 0,
                    calls: 0,
                },
            }
        }
        Strategy::SingleWorker { ordinal } => {
            worker_attempts(client, pool, *ordinal, sample, 1, job_seed)
        }
        Strategy::SelfReflection { ordinal, turns } => {
            worker_attempts(client, pool, *ordinal, sample, (*turns).max(1), job_seed)
        }
        Strategy::Consensus { ordinal, k } => {
            let worker = pool.worker_for_ordinal(*ordinal).expect("checked");
            let mut votes = Vec::with_capacity(*k as usize);
            let mut tokens = 0;
            let mut calls = 0;
            for j in 0..(*k).max(1) {
                let call = CallOptions {
                    seed: Some(derive_seed(job_seed, &[6, u64::from(j)])),
                    worker_ordinal: Some(*ordinal),
                };
                match client.complete(worker, &[ChatMessage::user(&sample.question)], call) {
                    Ok(result) => {
                        tokens += result.prompt_tokens + result.completion_tokens;
                        calls += 1;
                        votes.push(extract_answer(&result.content, &sample.verifier));
                    }
                    Err(_) => {
                        calls += 1;
                        votes.push(None);
                    }
                }
            }
            let winner = modal_answer(&votes);
            SampleOutcome {
                correct: verify(winner.as_deref(), sample),
                tokens,
                calls,
            }
        }
    }
}

/// Shared path for single-worker (turns = 1) and self-reflection: up to
/// `turns` attempts with all previous attempts kept in context.
fn worker_attempts(
    client: &WorkerClient,
    pool: &AgentPool,
    ordinal: usize,
    sample: &TaskSample,
    turns: u32,
    job_seed: u64,
) -> SampleOutcome {
    let worker = pool.worker_for_ordinal(ordinal).expect("checked");
    let mut conversation = vec![ChatMessage::user(&sample.question)];
    let mut tokens = 0;
    let mut calls = 0;
    let mut last_response: Option<String> = None;
    for attempt in 0..turns {
        let call = CallOptions {
            seed: Some(derive_seed(job_seed, &[6, u64::from(attempt)])),
            worker_ordinal: Some(ordinal),
        };
        match client.complete(worker, &conversation, call) {
            Ok(result) => {
                tokens += result.prompt_tokens + result.completion_tokens;
                calls += 1;
                last_response = Some(result.content.clone());
                if attempt + 1 < turns {
                    conversation.push(ChatMessage::assistant(result.content));
                    conversation.push(ChatMessage::user(REFLECTION_PROMPT));
                }
            }
            Err(_) => {
                calls += 1;
                break;
            }
        }
    }
    let correct = last_response.is_some_and(|response| {
        verify(extract_answer(&response, &sample.verifier).as_deref(), sample)
    });
    SampleOutcome {
        correct,
        tokens,
        calls,
    }
}

// ── Export / import ──────────────────────────────────────────

/// One exported training record; a rollout file holds one JSON document
/// per line. Re-importable losslessly for these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedEpisode {
    pub question_id: String,
    pub rollout_index: usize,
    pub prompt: String,
    pub completion: String,
    pub reward: f64,
    pub advantage: f64,
    pub schema: RewardSchema,
    pub format_ok: bool,
    pub matched: bool,
    pub rounds: usize,
    pub steps: usize,
    pub total_tokens: u64,
    pub final_response: Option<String>,
    pub error: Option<String>,
}

/// Serialize a batch to JSONL lines (one per episode, group order).
pub fn export_lines(batch: &RolloutBatch) -> Result<Vec<String>, HarnessError> {
    if batch.groups.is_empty() || batch.episodes() == 0 {
        return Err(HarnessError::EmptyBatch);
    }
    let mut lines = Vec::with_capacity(batch.episodes());
    for group in &batch.groups {
        for (i, collected) in group.completions.iter().enumerate() {
            let episode = collected.episode.as_ref();
            let record = ExportedEpisode {
                question_id: group.question_id.clone(),
                rollout_index: collected.rollout_index,
                prompt: episode.map(|e| e.prompt.clone()).unwrap_or_default(),
                completion: episode
                    .map(|e| e.conductor_completion().to_string())
                    .unwrap_or_default(),
                reward: group.rewards[i],
                advantage: group.advantages[i],
                schema: collected.reward.schema,
                format_ok: collected.reward.format_ok,
                matched: collected.reward.matched,
                rounds: episode.map(|e| e.rounds.len()).unwrap_or(0),
                steps: episode.map(|e| e.steps_executed()).unwrap_or(0),
                total_tokens: episode.map(|e| e.total_tokens).unwrap_or(0),
                final_response: episode.and_then(|e| e.final_response.clone()),
                error: collected.error.clone(),
            };
            lines.push(serde_json::to_string(&record).expect("record serializes"));
        }
    }
    Ok(lines)
}

/// Write a batch as JSONL; returns the number of lines written.
pub fn export_rollouts<W: std::io::Write>(
    batch: &RolloutBatch,
    mut writer: W,
) -> Result<usize, HarnessError> {
    let lines = export_lines(batch)?;
    for line in &lines {
        writeln!(writer, "{line}")?;
    }
    Ok(lines.len())
}

/// Parse exported JSONL back into records.
pub fn import_rollouts(text: &str) -> Result<Vec<ExportedEpisode>, HarnessError> {
    let mut episodes = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let record: ExportedEpisode =
            serde_json::from_str(line).map_err(|e| HarnessError::MalformedExport {
                line: index + 1,
                reason: e.to_string(),
            })?;
        episodes.push(record);
    }
    Ok(episodes)
}

/// Re-serialize imported records; `import` then `render` reproduces an
/// exported file byte for byte.
pub fn render_exports(episodes: &[ExportedEpisode]) -> Vec<String> {
    episodes
        .iter()
        .map(|e| serde_json::to_string(e).expect("record serializes"))
        .collect()
}

// ── Report summaries ─────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub episodes: usize,
    pub questions: usize,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub format_failure_rate: f64,
    pub match_rate: f64,
    pub mean_steps: f64,
    pub total_tokens: u64,
}

impl ReportSummary {
    pub fn to_csv(&self) -> String {
        format!(
            "episodes,questions,mean_reward,mean_advantage,format_failure_rate,match_rate,mean_steps,total_tokens\n{},{},{},{},{},{},{},{}\n",
            self.episodes,
            self.questions,
            self.mean_reward,
            self.mean_advantage,
            self.format_failure_rate,
            self.match_rate,
            self.mean_steps,
            self.total_tokens
        )
    }
}

/// Aggregate exported rollout records into a summary.
pub fn summarize_exports(episodes: &[ExportedEpisode]) -> Result<ReportSummary, HarnessError> {
    if episodes.is_empty() {
        return Err(HarnessError::EmptyBatch);
    }
    let n = episodes.len() as f64;
    let questions = {
        let mut ids: Vec<&str> = episodes.iter().map(|e| e.question_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    Ok(ReportSummary {
        episodes: episodes.len(),
        questions,
        mean_reward: episodes.iter().map(|e| e.reward).sum::<f64>() / n,
        mean_advantage: episodes.iter().map(|e| e.advantage).sum::<f64>() / n,
        format_failure_rate: episodes.iter().filter(|e| !e.format_ok).count() as f64 / n,
        match_rate: episodes.iter().filter(|e| e.matched).count() as f64 / n,
        mean_steps: episodes.iter().map(|e| e.steps as f64).sum::<f64>() / n,
        total_tokens: episodes.iter().map(|e| e.total_tokens).sum(),
    })
}
