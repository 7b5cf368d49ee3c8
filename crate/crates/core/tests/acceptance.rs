//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`). Run with
//! `cargo test -p conductor-core --test acceptance -- --nocapture`.

use conductor_core::client::{
    derive_seed, MatchScope, MockRegistry, MockRule, MockScript, WorkerClient,
};
use conductor_core::engine::{
    execute_plan, run_episode, EngineError, EpisodeOptions, ExecOptions, RoundDisposition,
};
use conductor_core::grpo::{
    compute_advantages, surrogate_objective, toy_surrogate_gradient, toy_surrogate_value,
    toy_train, GrpoConfig, SurrogateBatch, ToyEnvironment, ToyPolicy,
};
use conductor_core::harness::{
    collect_rollouts, export_lines, import_rollouts, mean_and_stderr, modal_answer,
    render_exports, RolloutOptions,
};
use conductor_core::plan::{
    parse_conductor_output, render_plan, validate_plan, AccessSpec, WorkflowPlan, WorkflowStep,
};
use conductor_core::pool::{AgentPool, DecodingParams, WorkerSpec};
use conductor_core::prompt::PromptBundle;
use conductor_core::reward::{
    discount_initial_round, reward_from_flags, RewardSchema, TaskSample, VerifierKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

// ── Golden conductor completions ─────────────────────────────

const COMPLETION_TWO_STEP_CODE: &str = r#"Here's the plan: 1) Model 2 will develop an algorithm to efficiently count all possible complete subarrays for a given array, 2) Model 0 will implement the function to solve the problem.

model_id = [  2,  0 ]
subtasks = ["Develop an efficient algorithm to count the number of complete subarrays of an array", "Implement the algorithm described by the previous agent in Python"]
access_list = [  [] ,  ["all"] ]"#;

const COMPLETION_SMALL_MODEL_MATH: &str = r#"Here's the approach:

model_id = [0, 1, 2]

subtasks = ["Solve the problem step by step and provide the final value of $z_{2002}$ without explanations, equations, or steps in <idea> tags. Use standard LaTeX notation for the final result.",

"Verify the proposed solution by reapplying the function F(z) to check if it indeed leads to the same result after 2002 iterations. Use '<idea> ... </idea>' to show your verification steps and present the final correct answer according to the question's instructions.",

"Ensure the result is accurate and provide it in LaTeX notation as instructed."]

access_list = [[], ["all"], ["all"]]

This sequence divides the work:
1. Model 0 directly tackles solving the recurrence relation and providing the final value.
2. Model 1 verifies the result by applying the function repeatedly to confirm it converges as expected.
3. Model 2 ensures the accuracy of the solution and formats it according to the guidelines."#;

const COMPLETION_ONE_SHOT: &str = r#"This is a straightforward comprehension and recall task from the given text, so we only need one model to do that:
1. First, comprehend and recall the information from the story provided for the dog Tommy, which requires an understanding of the context and deducing Tommy's reason for going to the church.
2. Output the most accurate answer from the comprehension of the context.

model_id = [3]
subtasks = ["Deduce from the story provided in the user question, why Tommy still goes to the church every day to the most appropriate option among the given choices A, B, C, and D. Provide the option letter in <answer> tags, for example <answer>B</answer>."]
access_list = [[]]"#;

const COMPLETION_TREE: &str = r#"1. We need to calculate how much Susan pays for her 4 discounted tickets (Model 1). 2. We need to calculate how much Pam pays for her 5 discounted tickets (Model 2). 3. We need to determine the difference in cost between Pam's and Susan's tickets (Model 3).

model_id = [1, 2, 3]
subtasks = ["Calculate the cost of 4 tickets at a 25% discount.",

"Calculate the cost of 5 tickets at a 30% discount.",

"Determine the difference in cost between what Pam and Susan paid for their tickets."]
access_list = [[], [], ["all"]]"#;

const COMPLETION_FIVE_STEP: &str = r#"1. The first model (Model 6) should understand the problem statement and define the objectives. 2. The second model (Model 4) should analyze the given graph and its edges to understand the structure. 3. The third model (Model 5) should determine the strategy to find the minimum cost spanning tree. 4. The fourth model (Model 3) will implement the strategy in a Python function. 5. The final model (Model 2) will validate the implemented solution, ensuring it meets all constraints and requirements.

model_id = [6, 4, 5, 3, 2]

subtasks = ["Understand the problem statement and goals. Define what needs to be done to solve the given problem.",

"Analyze the graph structure and the constraints to identify key steps in the algorithm for solving the given problem.",

"Develop a strategy to find the minimum cost of a spanning tree with costs computed modulo K. Ensure the strategy can handle the input constraints.",

"Implement the strategy in a Python function to solve the problem as defined, ensuring all constraints are met.",

"Validate and test the Python implementation to ensure the solution is accurate and meets all requirements."]

access_list = [[], ["all"], ["all"], ["all"], ["all"]]"#;

const COMPLETION_RECURSION_RETURN: &str = r#"The previous response provided a correct and efficient solution. It seems well-reasoned and directly addresses the user's question with the correct Python code. Given that the model's response is correct and concise, I don't need to make any further attempts or verify it. Therefore, I will pass three empty lists to return the previous correct response to the user.

model_id = []
subtasks = []
access_list = []"#;

const COMPLETION_RECURSION_REVISE: &str = r#"The previous response seems to be correct, as it handles the presence of "ab" or "ba" in the stripped input string `s`. However, to ensure robustness, I'll ask one model to provide feedback and another to verify the solution.

model_id = [0, 1]

subtasks = ["Verify the previous solution and provide your feedback in <idea> tags. If correct, directly return the solution. If incorrect, correct it and return the final code in <answer> tags.",

"Review the previous model's work, verify its solution, and provide the final correct answer according to the user requirements. Show your reasoning in <idea> tags and return the final code in <answer> tags."]

access_list = [["all"], ["all"]]"#;

const EMPTY_TRIPLE: &str = "model_id = []\nsubtasks = []\naccess_list = []";

// ── Shared fixtures ──────────────────────────────────────────

fn mock_worker(name: &str, script: &str) -> WorkerSpec {
    WorkerSpec {
        name: name.to_string(),
        endpoint: format!("mock:{script}"),
        model_identifier: name.to_string(),
        metadata: String::new(),
        decoding: DecodingParams::default(),
        api_key_env: None,
        reasoning_field: None,
        max_tokens_field: None,
    }
}

fn step(ordinal: usize, subtask: &str, access: AccessSpec) -> WorkflowStep {
    WorkflowStep {
        worker_ordinal: ordinal,
        subtask: subtask.to_string(),
        access,
    }
}

fn random_plan(rng: &mut ChaCha8Rng) -> WorkflowPlan {
    let chars: Vec<char> = "ab c'\"\\[]{},=\n\tmodel_id😀0123/%<>".chars().collect();
    let steps = (0..rng.gen_range(0..=5))
        .map(|position| {
            let mut subtask: String = (0..rng.gen_range(1..24))
                .map(|_| chars[rng.gen_range(0..chars.len())])
                .collect();
            if subtask.trim().is_empty() {
                subtask.push('q');
            }
            let access = match rng.gen_range(0..if position > 0 { 3 } else { 2 }) {
                0 => AccessSpec::None,
                1 => AccessSpec::All,
                _ => {
                    let mut positions: Vec<usize> = (0..position).collect();
                    for i in (1..positions.len()).rev() {
                        positions.swap(i, rng.gen_range(0..=i));
                    }
                    positions.truncate(rng.gen_range(1..=position));
                    AccessSpec::Indices(positions)
                }
            };
            WorkflowStep {
                worker_ordinal: rng.gen_range(0..10),
                subtask,
                access,
            }
        })
        .collect();
    WorkflowPlan::new(steps)
}

// ── Criterion 1: parser golden suite ─────────────────────────

#[test]
fn criterion_01_parser_golden_suite() {
    let started = Instant::now();
    use AccessSpec::{All, None as NoAccess};

    let cases: Vec<(&str, &str, Vec<(usize, AccessSpec)>)> = vec![
        (
            "two-step code plan",
            COMPLETION_TWO_STEP_CODE,
            vec![(2, NoAccess), (0, All)],
        ),
        (
            "small-model math plan",
            COMPLETION_SMALL_MODEL_MATH,
            vec![(0, NoAccess), (1, All), (2, All)],
        ),
        ("one-shot plan", COMPLETION_ONE_SHOT, vec![(3, NoAccess)]),
        (
            "tree plan",
            COMPLETION_TREE,
            vec![(1, NoAccess), (2, NoAccess), (3, All)],
        ),
        (
            "five-step plan",
            COMPLETION_FIVE_STEP,
            vec![(6, NoAccess), (4, All), (5, All), (3, All), (2, All)],
        ),
        (
            "recursion revise plan",
            COMPLETION_RECURSION_REVISE,
            vec![(0, All), (1, All)],
        ),
    ];
    for (name, text, expected) in &cases {
        let outcome = parse_conductor_output(text, 5, false);
        let plan = outcome
            .plan
            .as_ref()
            .unwrap_or_else(|| panic!("{name} failed: {:?}", outcome.diagnostics));
        assert_eq!(plan.len(), expected.len(), "{name}: step count");
        for (i, (ordinal, access)) in expected.iter().enumerate() {
            assert_eq!(plan.steps[i].worker_ordinal, *ordinal, "{name}: step {i} ordinal");
            assert_eq!(&plan.steps[i].access, access, "{name}: step {i} access");
            assert!(!plan.steps[i].subtask.trim().is_empty(), "{name}: step {i} subtask");
        }
        // Every golden plan validates against a seven-worker pool and
        // survives a render / re-parse round trip.
        assert!(validate_plan(plan, 7, 5).is_empty(), "{name}: validation");
        let reparsed = parse_conductor_output(&render_plan(plan), 5, false);
        assert_eq!(reparsed.plan.as_ref(), Some(plan), "{name}: round trip");
    }

    // Exact subtasks for the two-step plan.
    let two_step = parse_conductor_output(COMPLETION_TWO_STEP_CODE, 5, false)
        .plan
        .unwrap();
    assert_eq!(
        two_step.steps[0].subtask,
        "Develop an efficient algorithm to count the number of complete subarrays of an array"
    );
    assert_eq!(
        two_step.steps[1].subtask,
        "Implement the algorithm described by the previous agent in Python"
    );

    // Empty-triple termination, bare and with a reasoning preamble.
    for text in [EMPTY_TRIPLE, COMPLETION_RECURSION_RETURN] {
        let plan = parse_conductor_output(text, 5, false).plan.unwrap();
        assert!(plan.is_empty());
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "[criterion 1] parser golden suite: PASS ({} transcripts, {:?})",
        cases.len() + 2,
        elapsed
    );
}

// ── Criterion 2: parser fuzzing and round-trips ──────────────

#[test]
fn criterion_02_parser_fuzzing_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);

    // 100,000 random byte strings: parsing must never panic.
    for _ in 0..100_000 {
        let len = rng.gen_range(0..256);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let text = String::from_utf8_lossy(&bytes);
        let fine_grained = rng.gen_bool(0.5);
        let _ = parse_conductor_output(&text, 5, fine_grained);
    }

    // 10,000 valid plans: exact round-trip, then mutation fuzzing.
    for _ in 0..10_000 {
        let plan = random_plan(&mut rng);
        let rendered = render_plan(&plan);
        let reparsed = parse_conductor_output(&rendered, 5, true);
        assert_eq!(
            reparsed.plan.as_ref(),
            Some(&plan),
            "round-trip failed for:\n{rendered}"
        );

        let mut mutated = rendered.into_bytes();
        for _ in 0..rng.gen_range(1..4) {
            if mutated.is_empty() {
                break;
            }
            let at = rng.gen_range(0..mutated.len());
            match rng.gen_range(0..3) {
                0 => mutated[at] = rng.gen(),
                1 => {
                    mutated.remove(at);
                }
                _ => mutated.insert(at, rng.gen()),
            }
        }
        let text = String::from_utf8_lossy(&mutated);
        let _ = parse_conductor_output(&text, 5, true);
    }

    println!("[criterion 2] parser fuzzing: PASS (100k random inputs, 10k mutated plans, 10k exact round-trips)");
}

// ── Criterion 3: advantage math ──────────────────────────────

#[test]
fn criterion_03_advantage_math() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xADA3);
    for _ in 0..1_000 {
        let g = rng.gen_range(2..=64);
        let mut rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(-1.0..1.0)).collect();
        rewards[0] += 2.0; // guarantee nonzero spread

        let advantages = compute_advantages(&rewards, 1e-8).unwrap();
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-9, "mean {mean}");
        assert!((std - 1.0).abs() <= 1e-9, "std {std}");

        // Shift invariance.
        let shift = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let shifted_adv = compute_advantages(&shifted, 1e-8).unwrap();
        for (a, b) in advantages.iter().zip(&shifted_adv) {
            assert!((a - b).abs() <= 1e-12, "shift changed advantage: {a} vs {b}");
        }

        // Positive-scale argmax invariance, exactly.
        let scale = rng.gen_range(0.1..10.0);
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        let scaled_adv = compute_advantages(&scaled, 1e-8).unwrap();
        let argmax = |values: &[f64]| {
            values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(&rewards), argmax(&scaled_adv));
        assert_eq!(argmax(&rewards), argmax(&advantages));
    }

    for g in [2usize, 7, 64] {
        assert_eq!(compute_advantages(&vec![0.5; g], 1e-8).unwrap(), vec![0.0; g]);
    }
    println!("[criterion 3] advantage math: PASS (1000 groups, shift/scale invariances, degenerate groups)");
}

// ── Criterion 4: surrogate math ──────────────────────────────

#[test]
fn criterion_04_surrogate_math() {
    // Hand-derived cases to 1e-12.
    let advantages = [0.4, -0.9, 1.3];
    let identity = surrogate_objective(&[1.0; 3], &advantages, 0.2, &[0.0; 3], 0.0).unwrap();
    assert!((identity - advantages.iter().sum::<f64>() / 3.0).abs() <= 1e-12);
    let clipped_up = surrogate_objective(&[2.0], &[1.0], 0.2, &[0.0], 0.0).unwrap();
    assert!((clipped_up - 1.2).abs() <= 1e-12);
    let unclipped_down = surrogate_objective(&[2.0], &[-1.0], 0.2, &[0.0], 0.0).unwrap();
    assert!((unclipped_down - (-2.0)).abs() <= 1e-12);

    // Analytic gradient vs central finite differences, 20 random
    // configurations (resampling any that touch a clip kink, where the
    // derivative is discontinuous).
    let mut rng = ChaCha8Rng::seed_from_u64(0x95AD);
    let mut checked = 0;
    while checked < 20 {
        let n = rng.gen_range(2..6);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let old: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let g = rng.gen_range(4..12);
        let actions: Vec<usize> = (0..g).map(|_| rng.gen_range(0..n)).collect();
        let advantages: Vec<f64> = (0..g).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let epsilon = 0.2;
        let beta = if rng.gen_bool(0.5) { 0.0 } else { 0.05 };
        let batch = SurrogateBatch {
            actions: &actions,
            advantages: &advantages,
            old_logits: &old,
            ref_logits: None,
            epsilon,
            beta,
        };
        let softmax_log = |logits: &[f64], a: usize| {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
            logits[a] - log_sum
        };
        let near_kink = actions.iter().any(|&a| {
            let ratio = (softmax_log(&logits, a) - softmax_log(&old, a)).exp();
            (ratio - (1.0 - epsilon)).abs() < 1e-3 || (ratio - (1.0 + epsilon)).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        checked += 1;
        let analytic = toy_surrogate_gradient(&logits, &batch);
        let h = 1e-6;
        for j in 0..n {
            let mut plus = logits.clone();
            plus[j] += h;
            let mut minus = logits.clone();
            minus[j] -= h;
            let fd = (toy_surrogate_value(&plus, &batch) - toy_surrogate_value(&minus, &batch))
                / (2.0 * h);
            let denom = f64::max(analytic[j].abs(), fd.abs()).max(1e-8);
            assert!(
                (analytic[j] - fd).abs() / denom <= 1e-5,
                "config {checked} component {j}: analytic {} vs fd {fd}",
                analytic[j]
            );
        }
    }
    println!("[criterion 4] surrogate math: PASS (hand cases at 1e-12, 20 gradient checks at 1e-5)");
}

// ── Criterion 5: reward schema ───────────────────────────────

#[test]
fn criterion_05_reward_schema() {
    // Exhaustive truth table.
    let table = [
        (RewardSchema::Conductor, false, false, 0.0),
        (RewardSchema::Conductor, false, true, 0.0),
        (RewardSchema::Conductor, true, false, 0.5),
        (RewardSchema::Conductor, true, true, 1.0),
        (RewardSchema::Classic, false, false, -1.0),
        (RewardSchema::Classic, false, true, -1.0),
        (RewardSchema::Classic, true, false, -0.5),
        (RewardSchema::Classic, true, true, 1.0),
    ];
    for (schema, format_ok, matched, expected) in table {
        let reward = reward_from_flags(format_ok, matched, schema);
        assert_eq!(reward.value, expected, "{schema:?} {format_ok} {matched}");
        if !format_ok {
            assert!(!reward.matched);
        }
    }

    // Round-0 discount applied exactly.
    let discounted = discount_initial_round(&[vec![1.0, 0.5], vec![1.0, 1.0]], 0.25).unwrap();
    assert_eq!(discounted[0], vec![0.25, 0.125]);
    assert_eq!(discounted[1], vec![1.0, 1.0]);
    println!("[criterion 5] reward schema: PASS (8-row truth table exact, 0.25 round-0 discount exact)");
}

// ── Criterion 6: execution semantics ─────────────────────────

#[test]
fn criterion_06_execution_semantics() {
    let started = Instant::now();
    let mut mocks = MockRegistry::new();
    mocks.insert("echo".into(), MockScript::constant("{{last_message}}"));
    mocks.insert(
        "slow".into(),
        MockScript {
            rules: Vec::new(),
            default_response: "slow answer".into(),
            seed: 0,
            default_delay_ms: 100,
        },
    );
    let client = WorkerClient::mock_only(mocks);
    let echo_pool = AgentPool::new((0..4).map(|i| mock_worker(&format!("e{i}"), "echo")).collect());
    let slow_pool = AgentPool::new((0..3).map(|i| mock_worker(&format!("s{i}"), "slow")).collect());

    // access_list [[], ["all"]]: step 1 sees step 0's subtask and
    // response, in order.
    let chain = WorkflowPlan::new(vec![
        step(0, "first task", AccessSpec::None),
        step(1, "second task", AccessSpec::All),
    ]);
    let trace = execute_plan(&client, &echo_pool, &chain, "the question", &ExecOptions::default())
        .unwrap();
    let messages = &trace.records[1].messages;
    assert_eq!(messages.len(), 3);
    assert!(messages[0].content.ends_with("first task"));
    assert_eq!(messages[1].content, trace.records[0].result.response_text());
    assert_eq!(messages[2].content, "second task");

    // access_list [[], [], ["all"]] with 100 ms workers: steps 0 and 1
    // overlap (50% margin), step 2 starts only after both finish.
    let tree = WorkflowPlan::new(vec![
        step(0, "left branch", AccessSpec::None),
        step(1, "right branch", AccessSpec::None),
        step(2, "merge", AccessSpec::All),
    ]);
    let trace = execute_plan(&client, &slow_pool, &tree, "q", &ExecOptions::default()).unwrap();
    let delay = 100u64;
    let overlap_span = trace.records[1].finished_ms.saturating_sub(trace.records[0].started_ms);
    assert!(
        overlap_span < delay * 3 / 2,
        "steps 0 and 1 did not overlap: span {overlap_span} ms"
    );
    assert!(trace.records[2].started_ms >= trace.records[0].finished_ms);
    assert!(trace.records[2].started_ms >= trace.records[1].finished_ms);

    // Fine-grained Indices([0, 2]) omits step 1 from the context.
    let fine = WorkflowPlan::new(vec![
        step(0, "alpha piece", AccessSpec::None),
        step(1, "beta piece", AccessSpec::None),
        step(2, "gamma piece", AccessSpec::None),
        step(3, "combine", AccessSpec::Indices(vec![0, 2])),
    ]);
    let trace = execute_plan(&client, &echo_pool, &fine, "q", &ExecOptions::default()).unwrap();
    let combined = &trace.records[3].messages;
    assert_eq!(combined.len(), 5);
    assert!(combined.iter().all(|m| !m.content.contains("beta piece")));
    assert!(combined[0].content.contains("alpha piece"));
    assert!(combined[2].content.contains("gamma piece"));

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("[criterion 6] execution semantics: PASS (chain context, tree overlap, fine-grained omission, {elapsed:?})");
}

// ── Criterion 7: recursion bounds ────────────────────────────

#[test]
fn criterion_07_recursion_bounds() {
    let mut mocks = MockRegistry::new();
    mocks.insert("echo".into(), MockScript::constant("{{last_message}}"));
    // Randomized conductor: sometimes garbage, sometimes the empty
    // triple, sometimes a two-step plan, otherwise a one-step plan.
    mocks.insert(
        "conductor".into(),
        MockScript {
            rules: vec![
                MockRule {
                    contains: String::new(),
                    scope: MatchScope::Any,
                    response: "no lists from me today".into(),
                    success_probability: Some(0.15),
                    delay_ms: None,
                    seed: Some(1),
                },
                MockRule {
                    contains: String::new(),
                    scope: MatchScope::Any,
                    response: EMPTY_TRIPLE.into(),
                    success_probability: Some(0.25),
                    delay_ms: None,
                    seed: Some(2),
                },
                MockRule {
                    contains: String::new(),
                    scope: MatchScope::Any,
                    response: "model_id = [0, 1]\nsubtasks = [\"draft\", \"polish\"]\naccess_list = [[], [\"all\"]]".into(),
                    success_probability: Some(0.3),
                    delay_ms: None,
                    seed: Some(3),
                },
            ],
            default_response: "model_id = [1]\nsubtasks = [\"solve\"]\naccess_list = [[]]".into(),
            seed: 0,
            default_delay_ms: 0,
        },
    );
    let client = WorkerClient::mock_only(mocks);
    let conductor = mock_worker("conductor", "conductor");
    let pool = AgentPool::new(vec![mock_worker("w0", "echo"), mock_worker("w1", "echo")]);
    let prompts = PromptBundle::default();

    let mut empty_terminations = 0usize;
    for episode_index in 0..1_000u64 {
        let max_recursions = (episode_index % 4) as u32;
        let opts = EpisodeOptions {
            max_recursions,
            seed: derive_seed(0xEC07, &[episode_index]),
            ..EpisodeOptions::default()
        };
        let episode = run_episode(&client, &conductor, &pool, "some question", &prompts, &opts)
            .expect("mock episodes never fail");
        assert!(
            episode.conductor_calls <= max_recursions + 1,
            "episode {episode_index}: {} calls with max_recursions {max_recursions}",
            episode.conductor_calls
        );
        assert_eq!(episode.conductor_calls as usize, episode.rounds.len());

        // Empty-plan termination returns the prior final response verbatim.
        for (r, round) in episode.rounds.iter().enumerate() {
            if round.disposition == RoundDisposition::EmptyTermination {
                let previous = episode.rounds[r - 1]
                    .trace
                    .as_ref()
                    .expect("round before a termination executed");
                assert_eq!(
                    episode.final_response.as_deref(),
                    Some(previous.final_response.as_str())
                );
                empty_terminations += 1;
            }
        }
    }
    assert!(empty_terminations > 20, "only {empty_terminations} empty terminations exercised");
    println!("[criterion 7] recursion bounds: PASS (1000 episodes, {empty_terminations} verbatim empty-plan terminations)");
}

// ── Criterion 8: toy GRPO convergence ────────────────────────

#[test]
fn criterion_08_toy_grpo_convergence() {
    let started = Instant::now();
    let env = ToyEnvironment::bandit(&[0.9, 0.1], RewardSchema::Conductor);
    let config = GrpoConfig {
        group_size: 32,
        ..GrpoConfig::default()
    };
    for seed in 0..10u64 {
        let mut policy = ToyPolicy::uniform(2, 0.25);
        let history = toy_train(&env, &mut policy, &config, 300, seed).unwrap();
        let final_stats = history.final_stats().unwrap();
        assert!(
            final_stats.probabilities[0] > 0.9,
            "seed {seed}: dominant probability {}",
            final_stats.probabilities[0]
        );
        let tail = &history.iterations[290..];
        let tail_reward = tail.iter().map(|s| s.mean_reward).sum::<f64>() / tail.len() as f64;
        assert!(tail_reward > 0.8, "seed {seed}: mean reward {tail_reward}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!("[criterion 8] toy GRPO convergence: PASS (10/10 seeds, {elapsed:?})");
}

// ── Criterion 9: pool subsetting ─────────────────────────────

#[test]
fn criterion_09_pool_subsetting() {
    let pool = AgentPool::new((0..4).map(|i| mock_worker(&format!("w{i}"), "echo")).collect());

    // 10,000 seeded draws of k=2 from n=4: all 6 pairs within ±3σ of
    // uniform (expected 10000/6, σ = sqrt(10000 · 1/6 · 5/6)).
    let mut counts = [0usize; 6];
    let pair_index = |a: usize, b: usize| match (a, b) {
        (0, 1) => 0,
        (0, 2) => 1,
        (0, 3) => 2,
        (1, 2) => 3,
        (1, 3) => 4,
        (2, 3) => 5,
        _ => unreachable!("subset positions are sorted"),
    };
    for seed in 0..10_000u64 {
        let subset = pool.sample_subset(2, seed).unwrap();
        let positions = subset.active_positions();
        counts[pair_index(positions[0], positions[1])] += 1;
    }
    let expected = 10_000.0 / 6.0;
    let sigma = (10_000.0_f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
    for (pair, &count) in counts.iter().enumerate() {
        assert!(
            (count as f64 - expected).abs() <= 3.0 * sigma,
            "pair {pair}: {count} vs expected {expected:.1} ± {:.1}",
            3.0 * sigma
        );
    }

    // Plans referencing out-of-subset ordinals are rejected before any
    // worker call, every time.
    let mut mocks = MockRegistry::new();
    mocks.insert("echo".into(), MockScript::constant("{{last_message}}"));
    let client = WorkerClient::mock_only(mocks);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9001);
    let mut rejected = 0;
    for seed in 0..100u64 {
        let subset = pool.sample_subset(2, seed).unwrap();
        let plan = WorkflowPlan::new(vec![step(
            rng.gen_range(2..10),
            "use a worker outside the subset",
            AccessSpec::None,
        )]);
        assert!(!validate_plan(&plan, subset.active_len(), 5).is_empty());
        match execute_plan(&client, &subset, &plan, "q", &ExecOptions::default()) {
            Err(EngineError::InvalidPlan(_)) => rejected += 1,
            other => panic!("expected rejection, got {other:?}"),
        }
    }
    assert_eq!(rejected, 100);
    assert_eq!(client.calls_made(), 0, "a rejected plan reached a worker");
    println!("[criterion 9] pool subsetting: PASS (6 pairs within ±3σ, 100/100 out-of-subset rejections, 0 worker calls)");
}

// ── Criterion 10: eval harness oracle ────────────────────────

fn brute_force_modal(votes: &[Option<String>]) -> Option<String> {
    let mut best: Option<(String, usize)> = None;
    for (i, vote) in votes.iter().enumerate() {
        let Some(answer) = vote else { continue };
        if votes[..i].iter().any(|v| v.as_ref() == Some(answer)) {
            continue; // already considered at its first occurrence
        }
        let count = votes.iter().flatten().filter(|v| *v == answer).count();
        if best.as_ref().is_none_or(|(_, bc)| count > *bc) {
            best = Some((answer.clone(), count));
        }
    }
    best.map(|(answer, _)| answer)
}

#[test]
fn criterion_10_eval_harness_oracle() {
    // Hand-computed mean and stderr.
    let (mean, stderr) = mean_and_stderr(&[1.0, 1.0, 0.0, 1.0]);
    assert_eq!(mean, 0.75);
    assert_eq!(stderr, 0.25);
    assert_eq!(mean_and_stderr(&[0.4]), (0.4, 0.0));

    // Consensus majority vote vs a brute-force modal oracle.
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0A1);
    let letters = ["A", "B", "C", "D", "E"];
    for _ in 0..1_000 {
        let votes: Vec<Option<String>> = (0..rng.gen_range(1..10))
            .map(|_| {
                rng.gen_bool(0.8)
                    .then(|| letters[rng.gen_range(0..letters.len())].to_string())
            })
            .collect();
        assert_eq!(modal_answer(&votes), brute_force_modal(&votes), "{votes:?}");
    }

    // Full batch: 4 questions x 64 rollouts = 256 episodes against
    // mocks, exported and re-imported byte-for-byte, in under 30 s.
    let started = Instant::now();
    let mut mocks = MockRegistry::new();
    mocks.insert(
        "conductor".into(),
        MockScript {
            rules: vec![MockRule {
                contains: String::new(),
                scope: MatchScope::Any,
                response: "thinking only, no action".into(),
                success_probability: Some(0.3),
                delay_ms: None,
                seed: None,
            }],
            default_response:
                "model_id = [0, 1]\nsubtasks = [\"attempt the question in <answer> tags\", \"verify and return the answer in <answer> tags\"]\naccess_list = [[], [\"all\"]]"
                    .into(),
            seed: 6,
            default_delay_ms: 0,
        },
    );
    mocks.insert(
        "solver".into(),
        MockScript {
            rules: vec![MockRule {
                contains: String::new(),
                scope: MatchScope::Any,
                response: "I conclude <answer>B</answer>".into(),
                success_probability: Some(0.6),
                delay_ms: None,
                seed: None,
            }],
            default_response: "I conclude <answer>C</answer>".into(),
            seed: 7,
            default_delay_ms: 0,
        },
    );
    mocks.insert("returner".into(), MockScript::constant("{{last_assistant}}"));
    let client = WorkerClient::mock_only(mocks);
    let conductor = mock_worker("conductor", "conductor");
    let pool = AgentPool::new(vec![
        mock_worker("solver", "solver"),
        mock_worker("returner", "returner"),
    ]);
    let dataset: Vec<TaskSample> = (0..6)
        .map(|i| TaskSample {
            id: format!("q{i}"),
            question: format!("pick the right option, case {i}"),
            solution: "B".to_string(),
            verifier: VerifierKind::MultipleChoice,
            domain_tag: "mc".to_string(),
        })
        .collect();
    let config = GrpoConfig::default(); // G = 64
    let opts = RolloutOptions {
        questions_per_iter: 4,
        seed: 0xBA7C,
        ..RolloutOptions::default()
    };
    let batch = collect_rollouts(
        &client,
        &conductor,
        &pool,
        &PromptBundle::default(),
        &dataset,
        &config,
        &opts,
    )
    .unwrap();
    assert_eq!(batch.episodes(), 256);
    let lines = export_lines(&batch).unwrap();
    assert_eq!(lines.len(), 256);
    let text = lines.join("\n");
    let imported = import_rollouts(&text).unwrap();
    assert_eq!(render_exports(&imported).join("\n"), text);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!("[criterion 10] eval harness oracle: PASS (stderr oracle exact, 1000 modal votes, 256-episode batch in {elapsed:?})");
}
