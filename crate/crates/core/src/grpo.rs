//! GRPO math: group-relative advantages, the clipped surrogate
//! objective with an optional k3 KL penalty, and a toy softmax policy
//! over a catalog of plan templates.
//!
//! The toy policy closes the training signal end-to-end at desk scale:
//! plans sampled from the policy execute against scripted workers, get
//! scored by the reward schema, and the analytic policy gradient of the
//! clipped surrogate updates the logits. Real model updates are out of
//! scope; the math here is what an external trainer consumes.

use crate::client::{derive_seed, MockRegistry, MockRule, MockScript, WorkerClient};
use crate::engine::{execute_plan, ExecOptions};
use crate::plan::{AccessSpec, WorkflowPlan, WorkflowStep};
use crate::pool::{AgentPool, DecodingParams, WorkerSpec};
use crate::reward::{extract_answer, reward_from_flags, verify, RewardSchema, TaskSample, VerifierKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("mismatched lengths: {0}")]
    LengthMismatch(String),
    #[error("probability ratio at index {index} is not positive: {value}")]
    NonPositiveRatio { index: usize, value: f64 },
    #[error("plan-template catalog needs at least 2 entries")]
    CatalogTooSmall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub std_epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 64,
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            std_epsilon: 1e-8,
        }
    }
}

/// Group-relative advantages: A_i = (r_i - mean) / std over the group,
/// with population std. A group whose spread is below `std_epsilon`
/// yields all zeros rather than dividing by ~0.
pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = variance.sqrt();
    if std < std_epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Clipped surrogate objective:
/// (1/G) Σ [ min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i) - β·kl_i ].
pub fn surrogate_objective(
    ratios: &[f64],
    advantages: &[f64],
    epsilon: f64,
    kl_terms: &[f64],
    beta: f64,
) -> Result<f64, GrpoError> {
    if ratios.len() != advantages.len() || ratios.len() != kl_terms.len() {
        return Err(GrpoError::LengthMismatch(format!(
            "{} ratios, {} advantages, {} kl terms",
            ratios.len(),
            advantages.len(),
            kl_terms.len()
        )));
    }
    let mut total = 0.0;
    for (index, ((&ratio, &advantage), &kl)) in
        ratios.iter().zip(advantages).zip(kl_terms).enumerate()
    {
        if ratio.is_nan() || ratio <= 0.0 {
            return Err(GrpoError::NonPositiveRatio {
                index,
                value: ratio,
            });
        }
        let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
        total += f64::min(ratio * advantage, clipped * advantage) - beta * kl;
    }
    Ok(total / ratios.len() as f64)
}

/// k3 KL estimator: exp(d) - d - 1 for d = log π_ref - log π_θ at the
/// sampled action. Nonnegative, zero at d = 0.
pub fn k3_kl(log_ratio: f64) -> f64 {
    log_ratio.exp() - log_ratio - 1.0
}

/// G completions of one question with rewards and normalized advantages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutGroup<C> {
    pub question_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// New/old policy probability ratios, when the trainer tracks them.
    pub ratios: Option<Vec<f64>>,
    pub completions: Vec<C>,
}

impl<C> RolloutGroup<C> {
    pub fn new(
        question_id: impl Into<String>,
        rewards: Vec<f64>,
        completions: Vec<C>,
        std_epsilon: f64,
    ) -> Result<Self, GrpoError> {
        if rewards.len() != completions.len() {
            return Err(GrpoError::LengthMismatch(format!(
                "{} rewards, {} completions",
                rewards.len(),
                completions.len()
            )));
        }
        let advantages = compute_advantages(&rewards, std_epsilon)?;
        Ok(Self {
            question_id: question_id.into(),
            rewards,
            advantages,
            ratios: None,
            completions,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

// ── Toy policy ───────────────────────────────────────────────

/// Softmax policy over a finite plan-template catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub logits: Vec<f64>,
    pub learning_rate: f64,
}

impl ToyPolicy {
    pub fn uniform(templates: usize, learning_rate: f64) -> Self {
        Self {
            logits: vec![0.0; templates],
            learning_rate,
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let probs = self.probabilities();
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        for (action, p) in probs.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                return action;
            }
        }
        probs.len() - 1
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|l| (l - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|l| l - log_sum).collect()
}

/// One sampled group, as seen by the surrogate: actions with advantages,
/// the logits the group was sampled under, and an optional reference for
/// the KL penalty (defaults to the sampling logits).
#[derive(Debug, Clone, Copy)]
pub struct SurrogateBatch<'a> {
    pub actions: &'a [usize],
    pub advantages: &'a [f64],
    pub old_logits: &'a [f64],
    pub ref_logits: Option<&'a [f64]>,
    pub epsilon: f64,
    pub beta: f64,
}

/// Value of the clipped surrogate at `logits` for a sampled batch, with
/// ρ_i = π(a_i)/π_old(a_i) and the per-sample k3 KL penalty.
pub fn toy_surrogate_value(logits: &[f64], batch: &SurrogateBatch<'_>) -> f64 {
    let log_new = log_softmax(logits);
    let log_old = log_softmax(batch.old_logits);
    let log_ref: Vec<f64> = match batch.ref_logits {
        Some(r) => log_softmax(r),
        None => log_old.clone(),
    };
    let mut total = 0.0;
    for (&action, &advantage) in batch.actions.iter().zip(batch.advantages) {
        let ratio = (log_new[action] - log_old[action]).exp();
        let clipped = ratio.clamp(1.0 - batch.epsilon, 1.0 + batch.epsilon);
        total += f64::min(ratio * advantage, clipped * advantage);
        if batch.beta > 0.0 {
            total -= batch.beta * k3_kl(log_ref[action] - log_new[action]);
        }
    }
    total / batch.actions.len() as f64
}

/// Analytic gradient of [`toy_surrogate_value`] with respect to
/// `logits`. Where the min selects the clipped term the sample
/// contributes no policy gradient; where it selects the unclipped term
/// the contribution is A_i ρ_i (e_{a_i} - π).
pub fn toy_surrogate_gradient(logits: &[f64], batch: &SurrogateBatch<'_>) -> Vec<f64> {
    let probs = softmax(logits);
    let log_new = log_softmax(logits);
    let log_old = log_softmax(batch.old_logits);
    let log_ref: Vec<f64> = match batch.ref_logits {
        Some(r) => log_softmax(r),
        None => log_old.clone(),
    };
    let n = logits.len();
    let mut grad = vec![0.0; n];
    for (&action, &advantage) in batch.actions.iter().zip(batch.advantages) {
        let ratio = (log_new[action] - log_old[action]).exp();
        let clipped = ratio.clamp(1.0 - batch.epsilon, 1.0 + batch.epsilon);
        let unclipped_term = ratio * advantage;
        let clipped_term = clipped * advantage;
        // d(π(a)/π_old(a))/dlogits = ρ (e_a - π); add it when the
        // unclipped branch is active (ties have equal derivatives).
        if unclipped_term <= clipped_term {
            let scale = advantage * ratio;
            for j in 0..n {
                let indicator = if j == action { 1.0 } else { 0.0 };
                grad[j] += scale * (indicator - probs[j]);
            }
        }
        if batch.beta > 0.0 {
            // d(-β k3)/dp = β (exp(d) - 1), d = log π_ref(a) - log π(a).
            let d = log_ref[action] - log_new[action];
            let scale = batch.beta * (d.exp() - 1.0);
            for j in 0..n {
                let indicator = if j == action { 1.0 } else { 0.0 };
                grad[j] += scale * (indicator - probs[j]);
            }
        }
    }
    for g in &mut grad {
        *g /= batch.actions.len() as f64;
    }
    grad
}

// ── Toy environment and training loop ────────────────────────

/// Scripted bandit: template t routes a one-step plan to mock worker t,
/// which answers correctly with probability `success_probs[t]`.
pub struct ToyEnvironment {
    pub catalog: Vec<WorkflowPlan>,
    pub pool: AgentPool,
    pub client: WorkerClient,
    pub sample: TaskSample,
    pub schema: RewardSchema,
}

impl ToyEnvironment {
    pub fn bandit(success_probs: &[f64], schema: RewardSchema) -> Self {
        let mut mocks = MockRegistry::new();
        let mut workers = Vec::with_capacity(success_probs.len());
        for (t, &p) in success_probs.iter().enumerate() {
            let script = MockScript {
                rules: vec![MockRule {
                    contains: String::new(),
                    scope: Default::default(),
                    response: "42".to_string(),
                    success_probability: Some(p),
                    delay_ms: None,
                    seed: None,
                }],
                default_response: "incorrect attempt".to_string(),
                seed: t as u64,
                default_delay_ms: 0,
            };
            mocks.insert(format!("arm{t}"), script);
            workers.push(WorkerSpec {
                name: format!("arm{t}"),
                endpoint: format!("mock:arm{t}"),
                model_identifier: format!("arm{t}"),
                metadata: String::new(),
                decoding: DecodingParams::default(),
                api_key_env: None,
                reasoning_field: None,
                max_tokens_field: None,
            });
        }
        let catalog = (0..success_probs.len())
            .map(|t| {
                WorkflowPlan::new(vec![WorkflowStep {
                    worker_ordinal: t,
                    subtask: "Solve the task.".to_string(),
                    access: AccessSpec::None,
                }])
            })
            .collect();
        Self {
            catalog,
            pool: AgentPool::new(workers),
            client: WorkerClient::mock_only(mocks),
            sample: TaskSample {
                id: "toy".to_string(),
                question: "What is the answer?".to_string(),
                solution: "42".to_string(),
                verifier: VerifierKind::Exact,
                domain_tag: "toy".to_string(),
            },
            schema,
        }
    }

    /// Execute one template end-to-end and score it.
    pub fn rollout(&self, action: usize, seed: u64) -> f64 {
        let opts = ExecOptions {
            seed,
            sequential: true,
            ..ExecOptions::default()
        };
        match execute_plan(&self.client, &self.pool, &self.catalog[action], &self.sample.question, &opts)
        {
            Ok(trace) => {
                let matched = verify(
                    extract_answer(&trace.final_response, &self.sample.verifier).as_deref(),
                    &self.sample,
                );
                reward_from_flags(true, matched, self.schema).value
            }
            Err(_) => reward_from_flags(false, false, self.schema).value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Policy probabilities after this iteration's update.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub iterations: Vec<IterationStats>,
}

impl TrainingHistory {
    pub fn final_stats(&self) -> Option<&IterationStats> {
        self.iterations.last()
    }

    /// CSV export: iteration, mean_reward, one probability column per
    /// template.
    pub fn to_csv(&self) -> String {
        let templates = self
            .iterations
            .first()
            .map(|s| s.probabilities.len())
            .unwrap_or(0);
        let mut out = String::from("iteration,mean_reward");
        for t in 0..templates {
            out.push_str(&format!(",prob_{t}"));
        }
        out.push('\n');
        for stats in &self.iterations {
            out.push_str(&format!("{},{}", stats.iteration, stats.mean_reward));
            for p in &stats.probabilities {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Train the toy policy: per iteration, sample G templates, execute them
/// against the scripted pool, normalize rewards into advantages, and
/// ascend the analytic gradient of the clipped surrogate. Deterministic
/// for a given seed.
pub fn toy_train(
    env: &ToyEnvironment,
    policy: &mut ToyPolicy,
    config: &GrpoConfig,
    iterations: usize,
    seed: u64,
) -> Result<TrainingHistory, GrpoError> {
    if env.catalog.len() < 2 {
        return Err(GrpoError::CatalogTooSmall);
    }
    if config.group_size < 2 {
        return Err(GrpoError::GroupTooSmall(config.group_size));
    }
    let mut history = TrainingHistory::default();
    for iteration in 0..iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, iteration as u64]));
        let old_logits = policy.logits.clone();
        let actions: Vec<usize> = (0..config.group_size)
            .map(|_| policy.sample(&mut rng))
            .collect();
        let rewards: Vec<f64> = actions
            .iter()
            .enumerate()
            .map(|(i, &action)| {
                env.rollout(action, derive_seed(seed, &[4, iteration as u64, i as u64]))
            })
            .collect();
        let advantages = compute_advantages(&rewards, config.std_epsilon)?;
        let batch = SurrogateBatch {
            actions: &actions,
            advantages: &advantages,
            old_logits: &old_logits,
            ref_logits: None,
            epsilon: config.clip_epsilon,
            beta: config.kl_beta,
        };
        let grad = toy_surrogate_gradient(&policy.logits, &batch);
        for (logit, g) in policy.logits.iter_mut().zip(grad) {
            *logit += policy.learning_rate * g;
        }
        history.iterations.push(IterationStats {
            iteration,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            probabilities: policy.probabilities(),
        });
    }
    Ok(history)
}
