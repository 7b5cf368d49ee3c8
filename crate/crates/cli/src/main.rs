//! `conductor`: execute, score, and collect training data for
//! plan-based multi-LLM coordination.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::Read;
use std::path::{Path, PathBuf};

use conductor_core::client::{ClientConfig, WorkerClient};
use conductor_core::engine::{run_episode, EpisodeOptions};
use conductor_core::grpo::{toy_train, GrpoConfig, ToyEnvironment, ToyPolicy};
use conductor_core::harness::{
    collect_rollouts, evaluate, export_rollouts, import_rollouts, summarize_exports, EvalOptions,
    RolloutOptions, Strategy,
};
use conductor_core::plan::{parse_conductor_output, render_plan, DEFAULT_MAX_STEPS};
use conductor_core::pool::{load_pool, AgentPool, PoolSetup, WorkerSpec};
use conductor_core::prompt::{FewShotSet, PromptBundle, PromptTemplate};
use conductor_core::reward::{
    load_samples_jsonl, reward_from_flags, verify, extract_answer, RewardSchema, TaskSample,
    VerifierKind, DEFAULT_NUMERIC_TOLERANCE,
};

#[derive(Parser)]
#[command(
    name = "conductor",
    version,
    about = "Runtime for plan-based multi-LLM coordination: parse plans, run episodes, collect rollouts, evaluate strategies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a conductor completion (stdin or file) into a workflow plan
    Parse(ParseArgs),
    /// Run a single episode against a pool and print the full record
    Run(RunArgs),
    /// Collect a rollout batch and export it as JSONL
    Rollout(RolloutArgs),
    /// Evaluate a strategy over a dataset with repeated trials
    Eval(EvalArgs),
    /// Train the toy softmax policy on a scripted bandit
    TrainToy(TrainToyArgs),
    /// Summarize an exported rollout file
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemaArg {
    Conductor,
    Classic,
}

impl From<SchemaArg> for RewardSchema {
    fn from(arg: SchemaArg) -> Self {
        match arg {
            SchemaArg::Conductor => RewardSchema::Conductor,
            SchemaArg::Classic => RewardSchema::Classic,
        }
    }
}

#[derive(Args)]
struct ParseArgs {
    /// Completion text file; stdin when omitted
    input: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    /// Accept index lists in access entries
    #[arg(long)]
    fine_grained: bool,
    /// Print the canonical three-assignment form instead of JSON
    #[arg(long)]
    render: bool,
}

#[derive(Args)]
struct PromptArgs {
    /// Few-shot examples file (JSON); bundled defaults when omitted
    #[arg(long)]
    few_shot: Option<PathBuf>,
    /// Conductor prompt template file
    #[arg(long)]
    conductor_template: Option<PathBuf>,
    /// Recursion prompt template file
    #[arg(long)]
    recursion_template: Option<PathBuf>,
}

#[derive(Args)]
struct PoolArgs {
    /// Pool configuration file (TOML)
    #[arg(long)]
    pool: PathBuf,
    /// Restrict to a seeded random k-subset of the pool
    #[arg(long)]
    subset_k: Option<usize>,
    /// Bound on concurrent in-flight worker requests
    #[arg(long, default_value_t = 16)]
    max_in_flight: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[command(flatten)]
    prompts: PromptArgs,
    /// Question text
    #[arg(long, conflicts_with = "question_file")]
    question: Option<String>,
    /// File holding the question text
    #[arg(long)]
    question_file: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    max_recursions: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    fine_grained: bool,
    /// Single-threaded step scheduling
    #[arg(long)]
    sequential: bool,
    /// Reference solution; when given, the episode is scored
    #[arg(long)]
    solution: Option<String>,
    /// Verifier for --solution
    #[arg(long, default_value = "exact")]
    verifier: String,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, value_enum, default_value_t = SchemaArg::Conductor)]
    schema: SchemaArg,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[command(flatten)]
    prompts: PromptArgs,
    /// Task samples (JSONL)
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 64)]
    group_size: usize,
    #[arg(long, default_value_t = 4)]
    questions_per_iter: usize,
    #[arg(long, default_value_t = 0)]
    iteration: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    max_recursions: u32,
    #[arg(long)]
    fine_grained: bool,
    #[arg(long, value_enum, default_value_t = SchemaArg::Conductor)]
    schema: SchemaArg,
    /// Output JSONL path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    concurrency: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Conductor,
    SingleWorker,
    SelfReflection,
    Consensus,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    pool: PoolArgs,
    #[command(flatten)]
    prompts: PromptArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Worker ordinal for the baseline strategies
    #[arg(long, default_value_t = 0)]
    ordinal: usize,
    /// Revision turns for self-reflection
    #[arg(long, default_value_t = 5)]
    turns: u32,
    /// Samples for consensus voting
    #[arg(long, default_value_t = 5)]
    k: u32,
    #[arg(long, default_value_t = 16)]
    trials: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    max_recursions: u32,
    #[arg(long)]
    fine_grained: bool,
    #[arg(long)]
    sequential: bool,
    /// Report label; dataset filename when omitted
    #[arg(long)]
    task_name: Option<String>,
    #[arg(long, default_value_t = 16)]
    concurrency: usize,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Per-template success probabilities, comma separated
    #[arg(long, default_value = "0.9,0.1")]
    success_probs: String,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    #[arg(long, default_value_t = 300)]
    iterations: usize,
    #[arg(long, default_value_t = 0.25)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    clip_epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    kl_beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SchemaArg::Conductor)]
    schema: SchemaArg,
    /// CSV history path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Exported rollout JSONL; stdin when omitted
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Parse(args) => cmd_parse(args),
        Command::Run(args) => cmd_run(args),
        Command::Rollout(args) => cmd_rollout(args),
        Command::Eval(args) => cmd_eval(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(path) => {
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
        }
        None => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text).context("reading stdin")?;
            Ok(text)
        }
    }
}

fn load_setup(args: &PoolArgs) -> Result<(PoolSetup, AgentPool, WorkerClient)> {
    let config = std::fs::read_to_string(&args.pool)
        .with_context(|| format!("reading {}", args.pool.display()))?;
    let setup = load_pool(&config)?;
    let pool = match args.subset_k {
        Some(k) => setup.pool.sample_subset(k, 0)?,
        None => setup.pool.clone(),
    };
    let client = WorkerClient::new(
        setup.mocks.clone(),
        ClientConfig {
            max_in_flight: args.max_in_flight,
            ..ClientConfig::default()
        },
    );
    Ok((setup, pool, client))
}

fn load_prompts(args: &PromptArgs, max_steps: usize, fine_grained: bool) -> Result<PromptBundle> {
    let mut bundle = PromptBundle::default();
    if let Some(path) = &args.conductor_template {
        bundle.conductor = PromptTemplate::new(
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        );
    }
    if let Some(path) = &args.recursion_template {
        bundle.recursion = PromptTemplate::new(
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        );
    }
    if let Some(path) = &args.few_shot {
        let json = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        bundle.few_shot = FewShotSet::from_json_str(&json, max_steps, fine_grained)?;
    }
    Ok(bundle)
}

fn require_conductor(setup: &PoolSetup) -> Result<&WorkerSpec> {
    setup
        .conductor
        .as_ref()
        .context("pool file has no [conductor] entry")
}

fn cmd_parse(args: ParseArgs) -> Result<()> {
    let raw = read_input(args.input.as_deref())?;
    let outcome = parse_conductor_output(&raw, args.max_steps, args.fine_grained);
    match outcome.plan {
        Some(plan) => {
            if args.render {
                println!("{}", render_plan(&plan));
            } else {
                println!("{}", serde_json::to_string_pretty(&plan)?);
            }
            Ok(())
        }
        None => {
            for diagnostic in &outcome.diagnostics {
                eprintln!("{diagnostic}");
            }
            bail!("completion did not parse into a plan");
        }
    }
}

fn parse_verifier(kind: &str, tolerance: Option<f64>) -> Result<VerifierKind> {
    Ok(match kind {
        "exact" => VerifierKind::Exact,
        "numeric" => VerifierKind::Numeric {
            tolerance: tolerance.unwrap_or(DEFAULT_NUMERIC_TOLERANCE),
        },
        "multiple_choice" => VerifierKind::MultipleChoice,
        "tagged_answer" => VerifierKind::TaggedAnswer,
        "boxed" => VerifierKind::Boxed,
        other => bail!("unknown verifier `{other}`"),
    })
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let question = match (&args.question, &args.question_file) {
        (Some(q), _) => q.clone(),
        (None, Some(path)) => read_input(Some(path))?.trim_end().to_string(),
        (None, None) => bail!("pass --question or --question-file"),
    };
    let (setup, pool, client) = load_setup(&args.pool)?;
    let conductor = require_conductor(&setup)?;
    let prompts = load_prompts(&args.prompts, args.max_steps, args.fine_grained)?;
    let opts = EpisodeOptions {
        max_steps: args.max_steps,
        max_recursions: args.max_recursions,
        fine_grained: args.fine_grained,
        seed: args.seed,
        sequential: args.sequential,
        ..EpisodeOptions::default()
    };
    let episode = run_episode(&client, conductor, &pool, &question, &prompts, &opts)?;

    let mut output = serde_json::to_value(&episode)?;
    if let Some(solution) = &args.solution {
        let sample = TaskSample {
            id: "cli".to_string(),
            question: question.clone(),
            solution: solution.clone(),
            verifier: parse_verifier(&args.verifier, args.tolerance)?,
            domain_tag: String::new(),
        };
        let format_ok = !episode.format_failure && episode.final_response.is_some();
        let matched = episode
            .final_response
            .as_deref()
            .is_some_and(|r| verify(extract_answer(r, &sample.verifier).as_deref(), &sample));
        let reward = reward_from_flags(format_ok, matched, args.schema.into());
        output
            .as_object_mut()
            .expect("episode serializes to an object")
            .insert("reward".to_string(), serde_json::to_value(reward)?);
    }
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn cmd_rollout(args: RolloutArgs) -> Result<()> {
    let (setup, pool, client) = load_setup(&args.pool)?;
    let conductor = require_conductor(&setup)?;
    let prompts = load_prompts(&args.prompts, args.max_steps, args.fine_grained)?;
    let dataset = load_samples_jsonl(&read_input(Some(&args.dataset))?)?;
    let config = GrpoConfig {
        group_size: args.group_size,
        ..GrpoConfig::default()
    };
    let opts = RolloutOptions {
        questions_per_iter: args.questions_per_iter,
        iteration: args.iteration,
        seed: args.seed,
        schema: args.schema.into(),
        episode: EpisodeOptions {
            max_steps: args.max_steps,
            max_recursions: args.max_recursions,
            fine_grained: args.fine_grained,
            ..EpisodeOptions::default()
        },
        concurrency: args.concurrency,
    };
    let batch = collect_rollouts(&client, conductor, &pool, &prompts, &dataset, &config, &opts)?;
    let written = match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            export_rollouts(&batch, std::io::BufWriter::new(file))?
        }
        None => export_rollouts(&batch, std::io::stdout().lock())?,
    };
    eprintln!(
        "exported {written} episodes ({} questions x group size {})",
        batch.questions.len(),
        args.group_size
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (setup, pool, client) = load_setup(&args.pool)?;
    let prompts = load_prompts(&args.prompts, args.max_steps, args.fine_grained)?;
    let dataset = load_samples_jsonl(&read_input(Some(&args.dataset))?)?;
    let strategy = match args.strategy {
        StrategyArg::Conductor => Strategy::Conductor,
        StrategyArg::SingleWorker => Strategy::SingleWorker {
            ordinal: args.ordinal,
        },
        StrategyArg::SelfReflection => Strategy::SelfReflection {
            ordinal: args.ordinal,
            turns: args.turns,
        },
        StrategyArg::Consensus => Strategy::Consensus {
            ordinal: args.ordinal,
            k: args.k,
        },
    };
    let task_name = args.task_name.clone().unwrap_or_else(|| {
        args.dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    });
    let opts = EvalOptions {
        task_name,
        trials: args.trials,
        seed: args.seed,
        episode: EpisodeOptions {
            max_steps: args.max_steps,
            max_recursions: args.max_recursions,
            fine_grained: args.fine_grained,
            sequential: args.sequential,
            ..EpisodeOptions::default()
        },
        concurrency: args.concurrency,
    };
    let report = evaluate(
        &client,
        &strategy,
        &dataset,
        &pool,
        setup.conductor.as_ref(),
        &prompts,
        &opts,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<()> {
    let success_probs: Vec<f64> = args
        .success_probs
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad success probability `{p}`"))
        })
        .collect::<Result<_>>()?;
    let env = ToyEnvironment::bandit(&success_probs, args.schema.into());
    let mut policy = ToyPolicy::uniform(success_probs.len(), args.learning_rate);
    let config = GrpoConfig {
        group_size: args.group_size,
        clip_epsilon: args.clip_epsilon,
        kl_beta: args.kl_beta,
        ..GrpoConfig::default()
    };
    let history = toy_train(&env, &mut policy, &config, args.iterations, args.seed)?;
    let csv = history.to_csv();
    match &args.out {
        Some(path) => std::fs::write(path, &csv)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    if let Some(stats) = history.final_stats() {
        eprintln!(
            "final mean reward {:.4}, probabilities {:?}",
            stats.mean_reward, stats.probabilities
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let text = read_input(args.input.as_deref())?;
    let episodes = import_rollouts(&text)?;
    let summary = summarize_exports(&episodes)?;
    match args.format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
        ReportFormat::Csv => print!("{}", summary.to_csv()),
    }
    Ok(())
}
