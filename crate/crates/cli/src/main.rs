use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use robotline::bench::{
    compare_controllers, conservation_suite, gradient_suite, run_experiment, ControllerSpec,
    ExperimentSpec, LlmSource,
};
use robotline::heuristics::{Admission, Heuristic, HeuristicKind, RulePriority};
use robotline::llm::{EndpointConfig, PromptOptions, ReplayStore};
use robotline::marl::{curve_csv, load_params, save_params, train, GradientVariant, MarlController, TrainConfig};
use robotline::sim::RewardMode;
use robotline::{run_episode, LineConfig};

const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "robotline", version, about = "Robot-served production line simulator and controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated runs of one controller.
    Run(RunArgs),
    /// Several controllers on the same line and seeds.
    Compare(CompareArgs),
    /// Re-run an LLM episode from a recorded transcript, without network access.
    Replay(ReplayArgs),
    /// Train the actor-critic policy.
    Train(TrainArgs),
    /// Conservation and gradient self-checks.
    Check(CheckArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerKind {
    Fcfs,
    Spt,
    Lpt,
    Rule,
    Llm,
    Marl,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdmissionArg {
    OnePartInFlight,
    Sequential,
}

impl From<AdmissionArg> for Admission {
    fn from(arg: AdmissionArg) -> Self {
        match arg {
            AdmissionArg::OnePartInFlight => Admission::OnePartInFlight,
            AdmissionArg::Sequential => Admission::Sequential,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LlmMode {
    /// Answers from a recorded transcript.
    Replay,
    /// Offline rule-following stand-in.
    Mock,
    /// HTTP chat-completions endpoint.
    Live,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RewardArg {
    Delta,
    Cumulative,
}

#[derive(Args)]
struct LineArgs {
    /// Built-in name (config1, config2) or path to a TOML file.
    #[arg(long, default_value = "config1")]
    config: String,
    /// Steps per episode; the configuration's horizon when omitted.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl LineArgs {
    fn line(&self) -> Result<LineConfig> {
        LineConfig::resolve(&self.config).with_context(|| format!("loading `{}`", self.config))
    }
}

#[derive(Args)]
struct ControllerArgs {
    #[arg(long, value_enum, default_value = "one-part-in-flight")]
    admission: AdmissionArg,
    #[arg(long, value_enum, default_value = "mock")]
    llm_mode: LlmMode,
    /// Transcript used by `--llm-mode replay`.
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// Spell out the feasibility rules of every action in the prompt.
    #[arg(long)]
    full_feasibility: bool,
    /// Trained policy parameters for the marl controller.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Let the marl controller choose only among feasible machines.
    #[arg(long)]
    mask_infeasible: bool,
}

impl ControllerArgs {
    fn endpoint(&self) -> EndpointConfig {
        let mut endpoint = EndpointConfig::default();
        if let Some(url) = &self.base_url {
            endpoint.base_url = url.clone();
        }
        if let Some(model) = &self.model {
            endpoint.model = model.clone();
        }
        if let Some(t) = self.temperature {
            endpoint.temperature = t;
        }
        if let Some(secs) = self.timeout_secs {
            endpoint.timeout = Duration::from_secs(secs);
        }
        if let Some(r) = self.retries {
            endpoint.retries = r;
        }
        if let Some(var) = &self.api_key_env {
            endpoint.api_key_env = Some(var.clone());
        }
        endpoint
    }

    fn spec(&self, kind: ControllerKind) -> Result<ControllerSpec> {
        let heuristic = |k| ControllerSpec::Heuristic(Heuristic::with_admission(k, self.admission.into()));
        Ok(match kind {
            ControllerKind::Fcfs => heuristic(HeuristicKind::Fcfs),
            ControllerKind::Spt => heuristic(HeuristicKind::Spt),
            ControllerKind::Lpt => heuristic(HeuristicKind::Lpt),
            ControllerKind::Rule => ControllerSpec::Rule(RulePriority::new()),
            ControllerKind::Llm => {
                let source = match self.llm_mode {
                    LlmMode::Mock => LlmSource::Mock,
                    LlmMode::Live => LlmSource::Live(self.endpoint()),
                    LlmMode::Replay => {
                        let Some(path) = &self.transcript else {
                            bail!("--llm-mode replay needs --transcript");
                        };
                        LlmSource::Replay(ReplayStore::load(path)?)
                    }
                };
                ControllerSpec::Llm {
                    source,
                    options: PromptOptions {
                        full_feasibility: self.full_feasibility,
                        priorities: None,
                    },
                }
            }
            ControllerKind::Marl => {
                let Some(path) = &self.params else {
                    bail!("the marl controller needs --params (see `robotline train`)");
                };
                ControllerSpec::Marl {
                    params: load_params(path)?,
                    mask_infeasible: self.mask_infeasible,
                }
            }
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    line: LineArgs,
    #[arg(long, value_enum)]
    controller: ControllerKind,
    #[arg(long, default_value_t = 25)]
    reps: usize,
    /// Output directory for summary.csv, throughputs.txt and traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export per-replication trace CSVs.
    #[arg(long)]
    traces: bool,
    #[command(flatten)]
    controller_args: ControllerArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    line: LineArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fcfs,spt,lpt,rule")]
    controllers: Vec<ControllerKind>,
    #[arg(long, default_value_t = 25)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    traces: bool,
    #[command(flatten)]
    controller_args: ControllerArgs,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    line: LineArgs,
    #[arg(long)]
    transcript: PathBuf,
    #[arg(long)]
    full_feasibility: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    line: LineArgs,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0.95)]
    gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    lr_actor: f64,
    #[arg(long, default_value_t = 0.01)]
    lr_critic: f64,
    #[arg(long, value_enum, default_value = "delta")]
    reward: RewardArg,
    #[arg(long)]
    mask_infeasible: bool,
    /// Where to write the trained parameters.
    #[arg(long, default_value = "policy.txt")]
    params_out: PathBuf,
    /// Optional CSV of per-episode throughput.
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 480)]
    horizon: usize,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flip the sign of the analytic gradient; the check must then fail.
    #[arg(long)]
    negative_control: bool,
}

fn experiment(
    line: &LineArgs,
    config: &LineConfig,
    controller: ControllerSpec,
    reps: usize,
    out: Option<PathBuf>,
    traces: bool,
) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(config.clone(), controller);
    spec.replications = reps;
    spec.horizon = line.horizon.unwrap_or(config.horizon);
    spec.base_seed = line.seed;
    spec.output_dir = out;
    spec.write_traces = traces;
    spec
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = args.line.line()?;
    let controller = args.controller_args.spec(args.controller)?;
    let spec = experiment(&args.line, &config, controller, args.reps, args.out, args.traces);
    let result = run_experiment(&spec)?;
    print!("{}", result.summary_csv());
    Ok(ExitCode::SUCCESS)
}

fn compare(args: CompareArgs) -> Result<ExitCode> {
    let config = args.line.line()?;
    let specs = args
        .controllers
        .iter()
        .map(|&kind| {
            let controller = args.controller_args.spec(kind)?;
            let out = args.out.as_ref().map(|dir| dir.join(controller.name()));
            Ok(experiment(&args.line, &config, controller, args.reps, out, args.traces))
        })
        .collect::<Result<Vec<_>>>()?;
    let comparison = compare_controllers(&specs)?;
    if let Some(dir) = &args.out {
        write(&dir.join("comparison.csv"), &comparison.to_csv())?;
    }
    print!("{}", comparison.to_table());
    Ok(ExitCode::SUCCESS)
}

fn replay(args: ReplayArgs) -> Result<ExitCode> {
    let config = args.line.line()?;
    let store = ReplayStore::load(&args.transcript)?;
    let mut controller = robotline::llm::LlmController::replay(store).with_options(PromptOptions {
        full_feasibility: args.full_feasibility,
        priorities: None,
    });
    let horizon = args.line.horizon.unwrap_or(config.horizon);
    let trace = run_episode(&config, &mut controller, args.line.seed, horizon)?;
    let fallbacks = controller.transcript().iter().filter(|r| r.fallback_used).count();
    println!(
        "throughput {} over {} steps ({} decisions, {} fallbacks)",
        trace.throughput,
        trace.len(),
        controller.transcript().len(),
        fallbacks
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(args: TrainArgs) -> Result<ExitCode> {
    let config = args.line.line()?;
    let hyper = TrainConfig {
        episodes: args.episodes,
        gamma: args.gamma,
        lr_actor: args.lr_actor,
        lr_critic: args.lr_critic,
        seed: args.line.seed,
        reward: match args.reward {
            RewardArg::Delta => RewardMode::Delta,
            RewardArg::Cumulative => RewardMode::Cumulative,
        },
        mask_infeasible: args.mask_infeasible,
        horizon: args.line.horizon,
    };
    let outcome = train::<f64>(&config, &hyper)?;
    save_params(&outcome.params, &args.params_out)?;
    if let Some(path) = &args.curve_out {
        write(path, &curve_csv(&outcome.curve))?;
    }
    let mut greedy = MarlController::greedy(outcome.params);
    greedy.mask_infeasible = args.mask_infeasible;
    let horizon = args.line.horizon.unwrap_or(config.horizon);
    let trace = run_episode(&config, &mut greedy, args.line.seed, horizon)?;
    println!(
        "trained {} episodes; greedy throughput {} (seed {}); parameters in {}",
        args.episodes,
        trace.throughput,
        args.line.seed,
        args.params_out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn check(args: CheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    match conservation_suite(args.episodes, args.horizon, args.seed) {
        Ok(report) => println!(
            "conservation: PASS ({} episodes, {} steps)",
            report.episodes, report.steps
        ),
        Err(e) => {
            println!("conservation: FAIL ({e})");
            ok = false;
        }
    }
    let variant = if args.negative_control {
        GradientVariant::SignFlipped
    } else {
        GradientVariant::Analytic
    };
    let worst = gradient_suite(args.points, args.seed, variant)?;
    let passed = worst < GRADIENT_TOLERANCE;
    println!(
        "gradient: {} (worst relative error {worst:.3e} over {} points)",
        if passed { "PASS" } else { "FAIL" },
        args.points
    );
    ok &= passed;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::Replay(args) => replay(args),
        Command::Train(args) => train_cmd(args),
        Command::Check(args) => check(args),
    }
}
