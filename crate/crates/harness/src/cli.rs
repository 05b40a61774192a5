//! `pbk` command-line surface. Exit codes: 0 success, 1 domain error,
//! 2 usage error.

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use policybank::bank::save_bank;
use policybank::environment::export_domain;
use policybank::evaluation::{RunReport, TaskRecord};
use policybank::provider::ModelIds;
use policybank::reviewer::init_bank;
use policybank::runtime::{JudgeMode, MemoryStrategyKind, RetrievalMode, RunConfig};
use policybank::scripted::{scripted_models, AgentMode};
use policybank::FeedbackRegime;

use crate::driver::{build_providers, execute_run, report_text, resolve_domain};
use crate::store::{record_path, ProviderKind, RunSpec, Store, REPORT_JSON};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "pbk",
    version,
    about = "Policy-gap experiments: runs, metrics and the review service"
)]
pub struct Cli {
    /// Run store directory (default: $PBK_STORE, else ./runs)
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the step-0 policy bank for a domain and write it to a file
    InitBank {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Execute a streaming evaluation run and print its report
    Run(RunArgs),
    /// Print the report of a finished run
    Metrics {
        #[arg(long)]
        run: String,
        /// Add the per-family stage breakdown
        #[arg(long)]
        by_stage: bool,
    },
    /// Write a built-in domain bundle to a directory
    ExportDomain {
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a run against the fixture store and compare trajectory hashes
    Replay {
        #[arg(long)]
        run: String,
        /// Fixture store (default: $PBK_FIXTURES, else the shipped store)
        #[arg(long)]
        fixtures: Option<String>,
    },
    /// Serve the HTTP API over the run store
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProviderArg {
    Live,
    Replay,
    Record,
    Scripted,
}

impl From<ProviderArg> for ProviderKind {
    fn from(p: ProviderArg) -> Self {
        match p {
            ProviderArg::Live => ProviderKind::Live,
            ProviderArg::Replay => ProviderKind::Replay,
            ProviderArg::Record => ProviderKind::Record,
            ProviderArg::Scripted => ProviderKind::Scripted,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AgentModeArg {
    Literal,
    Clarified,
    Adaptive,
}

impl From<AgentModeArg> for AgentMode {
    fn from(m: AgentModeArg) -> Self {
        match m {
            AgentModeArg::Literal => AgentMode::Literal,
            AgentModeArg::Clarified => AgentMode::Clarified,
            AgentModeArg::Adaptive => AgentMode::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, env = "PBK_PROVIDER", default_value_t = ProviderArg::Replay)]
    pub provider: ProviderArg,
    /// Fixture store for replay and record (default: the shipped store)
    #[arg(long, env = "PBK_FIXTURES")]
    pub fixtures: Option<String>,
    /// Scripted agent behavior; selects the model ids for scripted and replay providers
    #[arg(long, value_enum, default_value_t = AgentModeArg::Adaptive)]
    pub agent_mode: AgentModeArg,
}

impl BackendArgs {
    fn models(&self) -> ModelIds {
        match self.provider {
            ProviderArg::Scripted | ProviderArg::Replay => scripted_models(self.agent_mode.into()),
            ProviderArg::Live | ProviderArg::Record => ModelIds::from_env(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MemoryArg {
    Policybank,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RetrievalArg {
    Tool,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum JudgeArg {
    Predicates,
    Model,
    Off,
}

fn parse_feedback(s: &str) -> Result<FeedbackRegime, String> {
    match s {
        "reward" => Ok(FeedbackRegime::RewardOnly),
        "reward+explanation" => Ok(FeedbackRegime::RewardExplanation),
        "oracle" => Ok(FeedbackRegime::Oracle),
        "human" => Err("the human regime runs only through `serve` (POST /runs)".into()),
        other => Err(format!("expected reward, reward+explanation or oracle, got {other:?}")),
    }
}

/// Parsed `--seeds` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(s: &str) -> Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

/// Comma-separated seeds, each either `N` or a half-open range `A..B`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| format!("bad seed range {part:?}"))?;
            let b: u64 = b.parse().map_err(|_| format!("bad seed range {part:?}"))?;
            if a >= b {
                return Err(format!("empty seed range {part:?}"));
            }
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?);
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Built-in domain name or bundle directory
    #[arg(long)]
    pub domain: String,
    #[arg(long, value_enum, default_value_t = MemoryArg::Policybank)]
    pub memory: MemoryArg,
    #[arg(long, value_enum, default_value_t = RetrievalArg::Tool)]
    pub retrieval: RetrievalArg,
    /// reward, reward+explanation or oracle
    #[arg(long, value_parser = parse_feedback, default_value = "oracle")]
    pub feedback: FeedbackRegime,
    #[arg(long, default_value_t = 4)]
    pub trials: u32,
    /// e.g. `0,1,2` or `0..5`
    #[arg(long, value_parser = parse_seed_list, default_value = "0..5")]
    pub seeds: SeedList,
    #[arg(long, default_value_t = 40)]
    pub max_turns: usize,
    #[arg(long, value_enum, default_value_t = JudgeArg::Predicates)]
    pub judge: JudgeArg,
    #[arg(long, default_value_t = 1)]
    pub review_retries: u32,
    #[command(flatten)]
    pub backend: BackendArgs,
}

impl RunArgs {
    pub fn spec(&self) -> RunSpec {
        let config = RunConfig {
            memory_strategy: match self.memory {
                MemoryArg::Policybank => MemoryStrategyKind::Policybank,
                MemoryArg::None => MemoryStrategyKind::None,
            },
            retrieval_mode: match self.retrieval {
                RetrievalArg::Tool => RetrievalMode::Tool,
                RetrievalArg::Full => RetrievalMode::FullContext,
            },
            feedback_regime: self.feedback,
            trials: self.trials,
            seeds: self.seeds.0.clone(),
            max_turns: self.max_turns,
            models: self.backend.models(),
            judge: match self.judge {
                JudgeArg::Predicates => JudgeMode::Predicates,
                JudgeArg::Model => JudgeMode::Model,
                JudgeArg::Off => JudgeMode::Off,
            },
            review_retry_budget: self.review_retries,
        };
        RunSpec {
            domain: self.domain.clone(),
            config,
            provider: self.backend.provider.into(),
            fixtures: self.backend.fixtures.clone(),
        }
    }
}

/// Failure classified by exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Failure {
            code: EXIT_DOMAIN,
            error: error.into(),
        }
    }
}

fn store_dir(cli: &Cli) -> PathBuf {
    cli.store
        .clone()
        .or_else(|| std::env::var_os("PBK_STORE").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn open_store(cli: &Cli) -> Result<Store> {
    let dir = store_dir(cli);
    Store::open(&dir).with_context(|| format!("opening run store {}", dir.display()))
}

fn load_report(store: &Store, run_id: &str) -> Result<RunReport> {
    store.record(run_id)?;
    store
        .get_json(run_id, REPORT_JSON)
        .map_err(|_| anyhow!("run {run_id} has no report yet"))
}

/// Executes a parsed command, writing results to stdout.
pub fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::InitBank { domain, out, backend } => {
            let bundle = resolve_domain(domain)?;
            let spec = RunSpec {
                domain: domain.clone(),
                config: RunConfig {
                    models: backend.models(),
                    ..RunConfig::default()
                },
                provider: backend.provider.into(),
                fixtures: backend.fixtures.clone(),
            };
            let providers = build_providers(&spec, &bundle)?;
            let outcome = init_bank(
                &bundle,
                providers.reviewer.as_ref(),
                &spec.config.models.reviewer,
                spec.config.review_retry_budget,
            )
            .map_err(|f| anyhow!("initialization failed: {}", f.error))?;
            save_bank(&outcome.snapshot, out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} entries to {}", outcome.snapshot.entries.len(), out.display());
        }
        Command::Run(args) => {
            let spec = args.spec();
            spec.config.validate(false).map_err(usage)?;
            resolve_domain(&spec.domain)?;
            let store = open_store(cli)?;
            let record = store.create_run(spec)?;
            let report = execute_run(&store, &record.run_id, None)?;
            println!("run {}", record.run_id);
            print!("{}", report_text(&report));
        }
        Command::Metrics { run, by_stage } => {
            let store = open_store(cli)?;
            let report = load_report(&store, run)?;
            if *by_stage {
                print!("{}", report_text(&report));
            } else {
                print!("{}", policybank::evaluation::render_report_table(&[&report]));
            }
        }
        Command::ExportDomain { name, out } => {
            let bundle = resolve_domain(name)?;
            export_domain(&bundle, out).with_context(|| format!("exporting to {}", out.display()))?;
            println!(
                "exported {} ({} tasks) to {}",
                bundle.name,
                bundle.tasks.len(),
                out.display()
            );
        }
        Command::Replay { run, fixtures } => {
            let store = open_store(cli)?;
            let original = store.record(run)?;
            let bundle = resolve_domain(&original.spec.domain)?;
            let spec = RunSpec {
                provider: ProviderKind::Replay,
                fixtures: fixtures.clone().or_else(|| original.spec.fixtures.clone()),
                ..original.spec.clone()
            };
            let replayed = store.create_run(spec)?;
            execute_run(&store, &replayed.run_id, None)?;
            let (mut compared, mut mismatched) = (0usize, Vec::new());
            for &seed in &original.spec.config.seeds {
                for trial in 1..=original.spec.config.trials {
                    for task in &bundle.tasks {
                        let path = record_path(seed, trial, &task.task_id);
                        let a: TaskRecord = store.get_json(run, &path)?;
                        let b: TaskRecord = store.get_json(&replayed.run_id, &path)?;
                        compared += 1;
                        if a.trajectory_hash != b.trajectory_hash {
                            mismatched.push(path);
                        }
                    }
                }
            }
            println!("replay {} of {run}: {compared} trajectories compared", replayed.run_id);
            if !mismatched.is_empty() {
                for m in &mismatched {
                    println!("mismatch {m}");
                }
                return Err(anyhow!("{} of {compared} trajectory hashes differ", mismatched.len()).into());
            }
            println!("all trajectory hashes match");
        }
        Command::Serve { port, host } => {
            let store = Arc::new(open_store(cli)?);
            let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
            runtime.block_on(crate::service::serve(store, host, *port))?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

pub fn main() -> i32 {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    run_with_args(std::env::args_os())
}
