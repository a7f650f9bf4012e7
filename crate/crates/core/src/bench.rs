//! Replicated experiments, controller comparison and trace export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::heuristics::{Heuristic, RulePriority};
use crate::llm::{
    save_transcript, ChatClient, EndpointConfig, HttpChatClient, LlmController, LlmError,
    PromptOptions, ReplayClient, ReplayStore, RuleFollowingClient, TranscriptRecord,
};
use crate::marl::{grad_check_with, GradientVariant, MarlController, MarlError, PolicyParams, SmallMdp};
use crate::model::{ConfigError, ControllerDecision, JointAction, LineConfig, SystemState};
use crate::sim::{run_episode, Controller, ControllerError, EpisodeTrace, SimError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("comparison needs ≥ 2 experiments, got {0}")]
    TooFew(usize),
    #[error("comparison mixes configurations `{0}` and `{1}`")]
    MixedConfigs(String, String),
    #[error("cannot export an empty trace")]
    EmptyTrace,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> BenchError {
    let context = context.into();
    move |source| BenchError::Io { context, source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), BenchError> {
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

/// Where the LLM controller gets its replies.
#[derive(Debug, Clone)]
pub enum LlmSource {
    Replay(ReplayStore),
    /// Offline rule-following stand-in.
    Mock,
    Live(EndpointConfig),
}

#[derive(Debug, Clone)]
pub enum ControllerSpec {
    Heuristic(Heuristic),
    Rule(RulePriority),
    Llm {
        source: LlmSource,
        options: PromptOptions,
    },
    Marl {
        params: PolicyParams<f64>,
        mask_infeasible: bool,
    },
}

impl ControllerSpec {
    pub fn name(&self) -> String {
        match self {
            ControllerSpec::Heuristic(h) => h.name(),
            ControllerSpec::Rule(r) => r.name(),
            ControllerSpec::Llm { .. } => "llm".to_string(),
            ControllerSpec::Marl { .. } => "marl".to_string(),
        }
    }

    fn build_llm(
        source: &LlmSource,
        options: &PromptOptions,
        config: &LineConfig,
    ) -> Result<LlmController, BenchError> {
        let client: Box<dyn ChatClient> = match source {
            LlmSource::Replay(store) => Box::new(ReplayClient {
                store: store.clone(),
            }),
            LlmSource::Mock => Box::new(RuleFollowingClient::new(config.clone())),
            LlmSource::Live(endpoint) => Box::new(HttpChatClient::new(endpoint.clone())?),
        };
        Ok(LlmController::new(client).with_options(options.clone()))
    }
}

/// A controller instance for one replication.
enum Instance {
    Plain(Box<dyn Controller + Send>),
    Llm(LlmController),
}

impl Instance {
    fn build(spec: &ControllerSpec, config: &LineConfig) -> Result<Self, BenchError> {
        Ok(match spec {
            ControllerSpec::Heuristic(h) => Instance::Plain(Box::new(*h)),
            ControllerSpec::Rule(r) => Instance::Plain(Box::new(r.clone())),
            ControllerSpec::Llm { source, options } => {
                Instance::Llm(ControllerSpec::build_llm(source, options, config)?)
            }
            ControllerSpec::Marl {
                params,
                mask_infeasible,
            } => {
                if params.actions != config.machine_count
                    || params.agents() != config.robot_count
                    || params.features != crate::marl::feature_len(config)
                {
                    return Err(BenchError::InvalidSpec(
                        "policy parameters do not match the line".into(),
                    ));
                }
                let mut controller = MarlController::greedy(params.clone());
                controller.mask_infeasible = *mask_infeasible;
                Instance::Plain(Box::new(controller))
            }
        })
    }

    fn run(
        &mut self,
        config: &LineConfig,
        seed: u64,
        horizon: usize,
    ) -> Result<(EpisodeTrace, Vec<TranscriptRecord>), BenchError> {
        Ok(match self {
            Instance::Plain(controller) => (run_episode(config, controller, seed, horizon)?, Vec::new()),
            Instance::Llm(controller) => {
                let trace = run_episode(config, controller, seed, horizon)?;
                (trace, controller.take_transcript())
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: LineConfig,
    pub controller: ControllerSpec,
    pub replications: usize,
    pub horizon: usize,
    pub base_seed: u64,
    /// Summary, throughput list and (optionally) traces are written here.
    pub output_dir: Option<PathBuf>,
    pub write_traces: bool,
}

impl ExperimentSpec {
    pub fn new(config: LineConfig, controller: ControllerSpec) -> Self {
        let horizon = config.horizon;
        ExperimentSpec {
            config,
            controller,
            replications: 25,
            horizon,
            base_seed: 0,
            output_dir: None,
            write_traces: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.replications == 0 {
            return Err(BenchError::InvalidSpec("replications must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(BenchError::InvalidSpec("horizon must be at least 1".into()));
        }
        self.config.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub controller: String,
    pub config_name: String,
    pub horizon: usize,
    pub throughputs: Vec<u64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 when only one replication ran.
    pub std: f64,
    pub degenerate: bool,
    pub episode_seconds: Vec<f64>,
}

/// Mean and sample standard deviation; the flag marks a single sample.
pub fn mean_std(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, true);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0, true);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt(), false)
}

impl ExperimentResult {
    pub fn from_throughputs(
        controller: String,
        config_name: String,
        horizon: usize,
        throughputs: Vec<u64>,
        episode_seconds: Vec<f64>,
    ) -> Self {
        let values: Vec<f64> = throughputs.iter().map(|&y| y as f64).collect();
        let (mean, std, degenerate) = mean_std(&values);
        ExperimentResult {
            controller,
            config_name,
            horizon,
            throughputs,
            mean,
            std,
            degenerate,
            episode_seconds,
        }
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "{SUMMARY_HEADER}\n{}\n",
            self.summary_row()
        )
    }

    fn summary_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{}",
            self.controller,
            self.config_name,
            self.mean,
            self.std,
            self.throughputs.len(),
            self.horizon,
            self.degenerate
        )
    }

    pub fn throughputs_text(&self) -> String {
        self.throughputs.iter().map(|y| format!("{y}\n")).collect()
    }
}

const SUMMARY_HEADER: &str = "controller,config,mean,std,reps,horizon,degenerate";

/// Runs the replications (seeds `base_seed + k`) on the rayon pool.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult, BenchError> {
    spec.validate()?;
    let name = spec.controller.name();
    if let Some(dir) = &spec.output_dir {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    let runs: Vec<(u64, f64)> = (0..spec.replications)
        .into_par_iter()
        .map(|k| {
            let seed = spec.base_seed.wrapping_add(k as u64);
            let mut instance = Instance::build(&spec.controller, &spec.config)?;
            let started = Instant::now();
            let (trace, transcript) = instance.run(&spec.config, seed, spec.horizon)?;
            let seconds = started.elapsed().as_secs_f64();
            if let Some(dir) = &spec.output_dir {
                if spec.write_traces {
                    export_traces(&trace, dir, &format!("{name}_rep{k:03}"))?;
                }
                if !transcript.is_empty() {
                    let path = dir.join(format!("{name}_rep{k:03}_transcript.ndjson"));
                    save_transcript(&transcript, &path)?;
                }
            }
            Ok((trace.throughput, seconds))
        })
        .collect::<Result<_, BenchError>>()?;
    let (throughputs, seconds): (Vec<u64>, Vec<f64>) = runs.into_iter().unzip();
    let result = ExperimentResult::from_throughputs(
        name,
        spec.config.name.clone(),
        spec.horizon,
        throughputs,
        seconds,
    );
    if let Some(dir) = &spec.output_dir {
        write_file(&dir.join("summary.csv"), &result.summary_csv())?;
        write_file(&dir.join("throughputs.txt"), &result.throughputs_text())?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ExperimentResult>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for row in &self.rows {
            out.push_str(&row.summary_row());
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.controller.len())
            .chain(["controller".len()])
            .max()
            .unwrap_or(10);
        let mut out = format!("{:<width$}  {:>10}  {:>10}  {:>5}\n", "controller", "mean", "std", "reps");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.3}  {:>10.3}  {:>5}",
                r.controller,
                r.mean,
                r.std,
                r.throughputs.len()
            );
        }
        out
    }

    pub fn row(&self, controller: &str) -> Option<&ExperimentResult> {
        self.rows.iter().find(|r| r.controller == controller)
    }
}

/// Runs each experiment in order; all must share one configuration.
pub fn compare_controllers(specs: &[ExperimentSpec]) -> Result<Comparison, BenchError> {
    if specs.len() < 2 {
        return Err(BenchError::TooFew(specs.len()));
    }
    let first = &specs[0].config;
    if let Some(other) = specs.iter().find(|s| s.config != *first) {
        return Err(BenchError::MixedConfigs(
            first.name.clone(),
            other.config.name.clone(),
        ));
    }
    let rows = specs
        .iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Comparison { rows })
}

fn machine_label(machine: Option<usize>) -> String {
    machine.map_or_else(|| "0".to_string(), |m| (m + 1).to_string())
}

/// Per-step table: clock, (running, part, progress) per machine, buffer
/// levels, 1-based machine of every robot (0 = idle) and throughput.
pub fn trace_csv(trace: &EpisodeTrace) -> String {
    let Some(first) = trace.records.first() else {
        return String::new();
    };
    let m = first.state.machines.len();
    let b = first.state.buffers.len();
    let r = first.state.robots.len();
    let mut out = String::from("step,clock");
    for i in 1..=m {
        let _ = write!(out, ",m{i}_running,m{i}_part,m{i}_progress");
    }
    for k in 1..=b {
        let _ = write!(out, ",buffer{k}");
    }
    for k in 1..=r {
        let _ = write!(out, ",robot{k}_machine");
    }
    out.push_str(",throughput\n");
    for rec in &trace.records {
        let _ = write!(out, "{},{}", rec.step, rec.clock);
        for (machine, &t) in rec.state.machines.iter().zip(&trace.processing_time) {
            let _ = write!(
                out,
                ",{},{},{:.6}",
                u8::from(machine.running),
                u8::from(machine.has_part),
                machine.progress::<f64>(t)
            );
        }
        for level in &rec.state.buffers {
            let _ = write!(out, ",{level}");
        }
        for robot in &rec.state.robots {
            let _ = write!(out, ",{}", machine_label(robot.assigned_machine));
        }
        let _ = writeln!(out, ",{}", rec.state.throughput());
    }
    out
}

/// Writes `{prefix}_trace.csv`, `{prefix}_actions.csv`, `{prefix}_buffers.csv`
/// and `{prefix}_events.csv` into `dir`.
pub fn export_traces(trace: &EpisodeTrace, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, BenchError> {
    if trace.is_empty() {
        return Err(BenchError::EmptyTrace);
    }
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let robots = trace.records[0].state.robots.len();
    let buffers = trace.records[0].state.buffers.len();

    let mut actions = String::from("step,clock");
    for k in 1..=robots {
        let _ = write!(actions, ",robot{k}_request,robot{k}_machine");
    }
    actions.push('\n');
    let mut levels = String::from("step,clock");
    for k in 1..=buffers {
        let _ = write!(levels, ",buffer{k}");
    }
    levels.push_str(",throughput\n");
    let mut events = String::from("step,clock,event,robot,machine,detail\n");

    for rec in &trace.records {
        let _ = write!(actions, "{},{}", rec.step, rec.clock);
        for (k, robot) in rec.state.robots.iter().enumerate() {
            let request = rec
                .requested
                .as_ref()
                .map(|a| a.targets()[k].to_string())
                .unwrap_or_default();
            let _ = write!(actions, ",{request},{}", machine_label(robot.assigned_machine));
        }
        actions.push('\n');

        let _ = write!(levels, "{},{}", rec.step, rec.clock);
        for level in &rec.state.buffers {
            let _ = write!(levels, ",{level}");
        }
        let _ = writeln!(levels, ",{}", rec.state.throughput());

        let mut event = |kind: &str, robot: Option<usize>, machine: usize, detail: &str| {
            let robot = robot.map_or_else(String::new, |k| (k + 1).to_string());
            let _ = writeln!(
                events,
                "{},{},{kind},{robot},{},{detail}",
                rec.step,
                rec.clock,
                machine + 1
            );
        };
        let e = &rec.events;
        for &i in &e.failures {
            event("failure", None, i, "");
        }
        for &i in &e.repairs {
            event("repair", None, i, "");
        }
        for rej in &e.rejected_actions {
            let reason = format!("{:?}", rej.reason).to_lowercase();
            event("rejected", Some(rej.robot), rej.machine, &reason);
        }
        for &(k, i) in &e.dispatches {
            event("dispatch", Some(k), i, "");
        }
        for &i in &e.completions {
            event("completion", None, i, "");
        }
        for &(k, i) in &e.unloads {
            event("unload", Some(k), i, "");
        }
        for &(k, i) in &e.loads {
            event("load", Some(k), i, "");
        }
    }

    let files = [
        (format!("{prefix}_trace.csv"), trace_csv(trace)),
        (format!("{prefix}_actions.csv"), actions),
        (format!("{prefix}_buffers.csv"), levels),
        (format!("{prefix}_events.csv"), events),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}

/// Uniformly random targets for idle robots, used to exercise the engine.
#[derive(Debug, Clone)]
pub struct RandomDispatch {
    rng: ChaCha8Rng,
    wip_cap: Option<u32>,
}

impl RandomDispatch {
    pub fn new(seed: u64, wip_cap: Option<u32>) -> Self {
        RandomDispatch {
            rng: ChaCha8Rng::seed_from_u64(seed),
            wip_cap,
        }
    }
}

impl Controller for RandomDispatch {
    fn name(&self) -> String {
        "random".to_string()
    }

    fn decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, ControllerError> {
        let targets = state
            .robots
            .iter()
            .map(|r| {
                r.assigned_machine
                    .unwrap_or_else(|| self.rng.random_range(0..config.machine_count))
            })
            .collect();
        Ok(ControllerDecision::new(
            JointAction(targets),
            crate::model::DecisionSource::Fcfs,
        ))
    }

    fn wip_cap(&self) -> Option<u32> {
        self.wip_cap
    }
}

/// A random valid line with 2 to 5 machines.
pub fn random_config(rng: &mut impl Rng, horizon: usize) -> LineConfig {
    let m = rng.random_range(2..=5usize);
    let buffer_capacity: Vec<u32> = (0..m - 1).map(|_| rng.random_range(1..=4)).collect();
    let initial_buffer = buffer_capacity
        .iter()
        .map(|&cap| rng.random_range(0..=cap))
        .collect();
    let failures = rng.random_bool(0.5);
    let config = LineConfig {
        name: "random".to_string(),
        machine_count: m,
        processing_time: (0..m).map(|_| rng.random_range(1..=6)).collect(),
        handling_time: rng.random_range(1..=3),
        release_time: rng.random_range(0..=2),
        buffer_capacity,
        initial_buffer,
        robot_count: rng.random_range(1..m),
        mtbf: failures.then(|| (0..m).map(|_| rng.random_range(20.0..200.0)).collect()),
        mttr: failures.then(|| (0..m).map(|_| rng.random_range(2.0..40.0)).collect()),
        horizon,
        step_minutes: if rng.random_bool(0.2) { 2 } else { 1 },
        seed: rng.random(),
    };
    config.validate().expect("generated configuration is valid");
    config
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteReport {
    pub episodes: usize,
    pub steps: usize,
}

/// Random configurations driven by random dispatch; every step is checked
/// by the simulator's invariant checker. Stops at the first violation.
pub fn conservation_suite(episodes: usize, horizon: usize, seed: u64) -> Result<SuiteReport, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = 0;
    for _ in 0..episodes {
        let config = random_config(&mut rng, horizon);
        let cap = rng.random_bool(0.3).then(|| rng.random_range(1..=3));
        let mut controller = RandomDispatch::new(rng.random(), cap);
        let trace = run_episode(&config, &mut controller, rng.random(), horizon)?;
        steps += trace.len();
    }
    Ok(SuiteReport { episodes, steps })
}

/// Worst relative gradient error over `points` random parameter draws.
pub fn gradient_suite(points: usize, seed: u64, variant: GradientVariant) -> Result<f64, MarlError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..points {
        let agents = rng.random_range(1..=3);
        let actions = rng.random_range(2..=5);
        let features = rng.random_range(2..=10);
        let mdp = SmallMdp::<f64>::random(3, features, &mut rng);
        let params = PolicyParams::<f64>::random(agents, actions, features, 2.0, &mut rng);
        worst = worst.max(grad_check_with(&params, &mdp, variant)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heuristics::HeuristicKind;

    fn spec(controller: ControllerSpec, reps: usize) -> ExperimentSpec {
        ExperimentSpec {
            replications: reps,
            ..ExperimentSpec::new(LineConfig::config1(), controller)
        }
    }

    #[test]
    fn statistics() {
        let (m, s, d) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0_f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(!d);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0, true));
    }

    #[test]
    fn single_replication_is_degenerate() {
        let r = run_experiment(&spec(ControllerSpec::Rule(RulePriority::new()), 1)).unwrap();
        assert_eq!(r.std, 0.0);
        assert!(r.degenerate);
        assert_eq!(r.throughputs.len(), 1);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(ControllerSpec::Rule(RulePriority::new()), 0);
        assert!(matches!(run_experiment(&s), Err(BenchError::InvalidSpec(_))));
        s.replications = 1;
        s.horizon = 0;
        assert!(matches!(run_experiment(&s), Err(BenchError::InvalidSpec(_))));
    }

    #[test]
    fn comparison_errors() {
        let rule = spec(ControllerSpec::Rule(RulePriority::new()), 2);
        assert!(matches!(
            compare_controllers(std::slice::from_ref(&rule)),
            Err(BenchError::TooFew(1))
        ));
        let err = compare_controllers(std::slice::from_ref(&rule)).unwrap_err();
        assert!(err.to_string().contains("comparison needs ≥ 2"));
        let mut other = rule.clone();
        other.config = LineConfig::config2();
        assert!(matches!(
            compare_controllers(&[rule, other]),
            Err(BenchError::MixedConfigs(_, _))
        ));
    }

    #[test]
    fn comparison_table_is_ordered() {
        let specs = [
            spec(ControllerSpec::Rule(RulePriority::new()), 3),
            spec(ControllerSpec::Heuristic(Heuristic::new(HeuristicKind::Fcfs)), 3),
        ];
        let cmp = compare_controllers(&specs).unwrap();
        assert_eq!(cmp.rows[0].controller, "rule");
        assert!(cmp.row("rule").unwrap().mean > cmp.row("fcfs").unwrap().mean);
        let csv = cmp.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(SUMMARY_HEADER));
        assert!(cmp.to_table().lines().nth(1).unwrap().starts_with("rule"));
    }

    #[test]
    fn empty_trace_cannot_be_exported() {
        let c = LineConfig::config1();
        let mut rule = RulePriority::new();
        let trace = run_episode(&c, &mut rule, 0, 0).unwrap();
        assert_eq!(trace.throughput, 0);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_traces(&trace, dir.path(), "x"),
            Err(BenchError::EmptyTrace)
        ));
    }

    #[test]
    fn suites_pass_on_small_budgets() {
        let report = conservation_suite(20, 100, 1).unwrap();
        assert_eq!(report.episodes, 20);
        assert_eq!(report.steps, 2000);
        assert!(gradient_suite(5, 2, GradientVariant::Analytic).unwrap() < 1e-4);
        assert!(gradient_suite(5, 2, GradientVariant::SignFlipped).unwrap() > 0.5);
    }
}
