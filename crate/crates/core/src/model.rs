//! Domain types shared by the simulator, the controllers and the prompt builder.
//!
//! Indexing: machines are 0-based internally and 1-based in prompts and
//! reports. `buffers[k]` is the buffer between machine `k` and machine `k + 1`
//! (reported as "Buffer k+1"), so machine `m > 0` draws from `buffers[m - 1]`
//! and every machine but the last feeds `buffers[m]`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{ratio, Scalar};
use crate::sim::DowntimeSchedule;

const CONFIG1: &str = include_str!("../fixtures/config1.toml");
const CONFIG2: &str = include_str!("../fixtures/config2.toml");

pub const DEFAULT_HANDLING_TIME: u32 = 2;
pub const DEFAULT_RELEASE_TIME: u32 = 1;
pub const DEFAULT_HORIZON: usize = 480;
pub const DEFAULT_STEP_MINUTES: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("missing mandatory field `{0}`")]
    Missing(&'static str),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown configuration `{0}` (not a file and not a built-in name)")]
    Unknown(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("machine index {index} out of range for {machines} machines")]
    MachineOutOfRange { index: usize, machines: usize },
}

/// Static description of a serial line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineConfig {
    pub name: String,
    pub machine_count: usize,
    /// Minutes of processing per part, one entry per machine.
    pub processing_time: Vec<u32>,
    /// Minutes for a single load or a single unload operation.
    pub handling_time: u32,
    /// Minutes a robot stays with a machine after its handling sequence
    /// before it can be dispatched again.
    pub release_time: u32,
    /// One entry per intermediate buffer (`machine_count - 1`).
    pub buffer_capacity: Vec<u32>,
    pub initial_buffer: Vec<u32>,
    pub robot_count: usize,
    pub mtbf: Option<Vec<f64>>,
    pub mttr: Option<Vec<f64>>,
    /// Episode length in timesteps.
    pub horizon: usize,
    pub step_minutes: u32,
    pub seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    machine_count: Option<usize>,
    processing_time: Option<Vec<u32>>,
    handling_time: Option<u32>,
    release_time: Option<u32>,
    buffer_capacity: Option<Vec<u32>>,
    initial_buffer: Option<Vec<u32>>,
    robot_count: Option<usize>,
    mtbf: Option<Vec<f64>>,
    mttr: Option<Vec<f64>>,
    horizon: Option<usize>,
    step_minutes: Option<u32>,
    seed: Option<u64>,
}

/// Parses and validates a configuration document.
///
/// The document is TOML with the field names of [`LineConfig`]. Mandatory:
/// `machine_count`, `processing_time`, `buffer_capacity`, `robot_count`.
/// Defaults: `handling_time = 2`, `release_time = 1`, `initial_buffer` all
/// zero, no failures, `horizon = 480`, `step_minutes = 1`, `seed = 0`.
pub fn load_config(text: &str) -> Result<LineConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let machine_count = raw.machine_count.ok_or(ConfigError::Missing("machine_count"))?;
    let processing_time = raw
        .processing_time
        .ok_or(ConfigError::Missing("processing_time"))?;
    let buffer_capacity = raw
        .buffer_capacity
        .ok_or(ConfigError::Missing("buffer_capacity"))?;
    let robot_count = raw.robot_count.ok_or(ConfigError::Missing("robot_count"))?;
    let initial_buffer = raw
        .initial_buffer
        .unwrap_or_else(|| vec![0; buffer_capacity.len()]);
    let config = LineConfig {
        name: raw.name.unwrap_or_else(|| "custom".to_string()),
        machine_count,
        processing_time,
        handling_time: raw.handling_time.unwrap_or(DEFAULT_HANDLING_TIME),
        release_time: raw.release_time.unwrap_or(DEFAULT_RELEASE_TIME),
        buffer_capacity,
        initial_buffer,
        robot_count,
        mtbf: raw.mtbf,
        mttr: raw.mttr,
        horizon: raw.horizon.unwrap_or(DEFAULT_HORIZON),
        step_minutes: raw.step_minutes.unwrap_or(DEFAULT_STEP_MINUTES),
        seed: raw.seed.unwrap_or(0),
    };
    config.validate()?;
    Ok(config)
}

impl LineConfig {
    /// Built-in fixtures: `config1` and `config2`.
    pub fn builtin(name: &str) -> Option<LineConfig> {
        let text = match name {
            "config1" => CONFIG1,
            "config2" => CONFIG2,
            _ => return None,
        };
        Some(load_config(text).expect("built-in configuration is valid"))
    }

    pub fn config1() -> LineConfig {
        Self::builtin("config1").unwrap()
    }

    pub fn config2() -> LineConfig {
        Self::builtin("config2").unwrap()
    }

    /// Resolves a built-in name first, then a file path.
    pub fn resolve(reference: &str) -> Result<LineConfig, ConfigError> {
        if let Some(config) = Self::builtin(reference) {
            return Ok(config);
        }
        let path = Path::new(reference);
        if path.is_file() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
            return load_config(&text);
        }
        Err(ConfigError::Unknown(reference.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = self.machine_count;
        if m < 2 {
            return Err(invalid("machine_count", "at least two machines are required"));
        }
        if self.processing_time.len() != m {
            return Err(invalid(
                "processing_time",
                format!("expected {m} entries, found {}", self.processing_time.len()),
            ));
        }
        for (i, &t) in self.processing_time.iter().enumerate() {
            if t == 0 {
                return Err(invalid(format!("processing_time[{i}]"), "must be positive"));
            }
        }
        if self.handling_time == 0 {
            return Err(invalid("handling_time", "must be positive"));
        }
        if self.step_minutes == 0 {
            return Err(invalid("step_minutes", "must be positive"));
        }
        if self.buffer_capacity.len() != m - 1 {
            return Err(invalid(
                "buffer_capacity",
                format!("expected {} entries, found {}", m - 1, self.buffer_capacity.len()),
            ));
        }
        if self.initial_buffer.len() != m - 1 {
            return Err(invalid(
                "initial_buffer",
                format!("expected {} entries, found {}", m - 1, self.initial_buffer.len()),
            ));
        }
        for (k, (&cap, &init)) in self
            .buffer_capacity
            .iter()
            .zip(&self.initial_buffer)
            .enumerate()
        {
            if cap == 0 {
                return Err(invalid(format!("buffer_capacity[{k}]"), "must be positive"));
            }
            if init > cap {
                return Err(invalid(
                    format!("initial_buffer[{k}]"),
                    format!("initial buffer exceeds capacity ({init} > {cap})"),
                ));
            }
        }
        if self.robot_count == 0 {
            return Err(invalid("robot_count", "at least one robot is required"));
        }
        if self.robot_count >= m {
            return Err(invalid(
                "robot_count",
                format!("must be smaller than the machine count ({m})"),
            ));
        }
        match (&self.mtbf, &self.mttr) {
            (None, None) => {}
            (Some(_), None) => return Err(invalid("mttr", "required when mtbf is given")),
            (None, Some(_)) => return Err(invalid("mtbf", "required when mttr is given")),
            (Some(mtbf), Some(mttr)) => {
                for (field, values) in [("mtbf", mtbf), ("mttr", mttr)] {
                    if values.len() != m {
                        return Err(invalid(
                            field,
                            format!("expected {m} entries, found {}", values.len()),
                        ));
                    }
                    for (i, &v) in values.iter().enumerate() {
                        if !(v.is_finite() && v > 0.0) {
                            return Err(invalid(
                                format!("{field}[{i}]"),
                                "must be a positive finite number of minutes",
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn buffer_count(&self) -> usize {
        self.machine_count - 1
    }

    pub fn has_failures(&self) -> bool {
        self.mtbf.is_some()
    }

    /// Length of the flat state vector: `5M - 1`.
    pub fn state_len(&self) -> usize {
        5 * self.machine_count - 1
    }

    pub fn check_machine(&self, index: usize) -> Result<(), ModelError> {
        if index < self.machine_count {
            Ok(())
        } else {
            Err(ModelError::MachineOutOfRange {
                index,
                machines: self.machine_count,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub running: bool,
    pub has_part: bool,
    /// Processing minutes already spent on the current part.
    pub work_done: u32,
    /// The current part is processed and waiting to be unloaded.
    pub finished: bool,
    pub repair_remaining: f64,
    pub next_failure_at: Option<f64>,
}

impl MachineState {
    pub fn idle() -> Self {
        MachineState {
            running: true,
            has_part: false,
            work_done: 0,
            finished: false,
            repair_remaining: 0.0,
            next_failure_at: None,
        }
    }

    /// Progress as reported to controllers: 0 for an empty or finished
    /// machine, otherwise the processed fraction.
    pub fn progress<F: Scalar>(&self, processing_time: u32) -> F {
        if self.has_part && !self.finished {
            ratio(self.work_done as u64, processing_time as u64)
        } else {
            F::zero()
        }
    }

    pub fn is_processing(&self) -> bool {
        self.has_part && !self.finished
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    None,
    Unload,
    Load,
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub assigned_machine: Option<usize>,
    pub busy_remaining: u32,
    pub pending_phase: Phase,
}

impl RobotState {
    pub fn idle() -> Self {
        RobotState {
            assigned_machine: None,
            busy_remaining: 0,
            pending_phase: Phase::None,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.assigned_machine.is_none()
    }
}

/// Dynamic snapshot of the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    /// Minutes since the start of the episode.
    pub clock: u64,
    pub machines: Vec<MachineState>,
    /// Buffer levels, `machine_count - 1` entries. A part counts against the
    /// buffer feeding machine `k` until machine `k` releases it downstream.
    pub buffers: Vec<u32>,
    pub robots: Vec<RobotState>,
    /// Cumulative parts released by each machine since t = 0.
    pub produced: Vec<u64>,
    #[serde(skip)]
    pub downtime: Vec<DowntimeSchedule>,
}

impl SystemState {
    /// Parts released by the last machine.
    pub fn throughput(&self) -> u64 {
        *self.produced.last().unwrap_or(&0)
    }

    pub fn idle_robots(&self) -> impl Iterator<Item = usize> + '_ {
        self.robots
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_idle())
            .map(|(k, _)| k)
    }

    pub fn any_idle_robot(&self) -> bool {
        self.robots.iter().any(RobotState::is_idle)
    }

    pub fn robot_at(&self, machine: usize) -> bool {
        self.robots
            .iter()
            .any(|r| r.assigned_machine == Some(machine))
    }

    /// 1 when machine `m` holds a part or is being loaded.
    pub fn work_in_process(&self, machine: usize) -> u32 {
        let loading = self
            .robots
            .iter()
            .any(|r| r.assigned_machine == Some(machine) && r.pending_phase == Phase::Load);
        u32::from(self.machines[machine].has_part || loading)
    }

    /// Parts waiting in the buffer in front of machine `m` (excluding the one
    /// the machine currently holds). Machine 0 draws from an unlimited source.
    pub fn waiting_parts(&self, machine: usize) -> Option<u32> {
        if machine == 0 {
            None
        } else {
            Some(self.buffers[machine - 1].saturating_sub(self.work_in_process(machine)))
        }
    }

    /// Parts currently inside the line (loaded on machine 0 or anywhere downstream).
    pub fn parts_in_system(&self) -> u64 {
        self.work_in_process(0) as u64 + self.buffers.iter().map(|&b| b as u64).sum::<u64>()
    }

    pub fn check_dimensions(&self, config: &LineConfig) -> Result<(), ModelError> {
        let checks = [
            ("machines", self.machines.len(), config.machine_count),
            ("buffers", self.buffers.len(), config.buffer_count()),
            ("robots", self.robots.len(), config.robot_count),
            ("produced", self.produced.len(), config.machine_count),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(ModelError::DimensionMismatch {
                    what,
                    got,
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// One target machine per robot. Every pair is `(0, machine)`; the leading
/// element is reserved and always zero. `(0, 0)` doubles as the idle
/// placeholder: the simulator attempts machine 0 and idles the robot if that
/// is not feasible.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn new(targets: Vec<usize>, config: &LineConfig) -> Result<Self, ModelError> {
        let action = JointAction(targets);
        action.validate(config)?;
        Ok(action)
    }

    pub fn placeholder(robots: usize) -> Self {
        JointAction(vec![0; robots])
    }

    pub fn targets(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, config: &LineConfig) -> Result<(), ModelError> {
        if self.0.len() != config.robot_count {
            return Err(ModelError::DimensionMismatch {
                what: "joint action",
                got: self.0.len(),
                expected: config.robot_count,
            });
        }
        for &j in &self.0 {
            config.check_machine(j)?;
        }
        Ok(())
    }
}

impl fmt::Display for JointAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (k, j) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(", ")?;
            }
            write!(f, "(0,{j})")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Fcfs,
    Spt,
    Lpt,
    RulePriority,
    Llm,
    Marl,
}

impl fmt::Display for DecisionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DecisionSource::Fcfs => "fcfs",
            DecisionSource::Spt => "spt",
            DecisionSource::Lpt => "lpt",
            DecisionSource::RulePriority => "rule",
            DecisionSource::Llm => "llm",
            DecisionSource::Marl => "marl",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub joint_action: JointAction,
    pub rationale: Option<String>,
    pub source: DecisionSource,
}

impl ControllerDecision {
    pub fn new(joint_action: JointAction, source: DecisionSource) -> Self {
        ControllerDecision {
            joint_action,
            rationale: None,
            source,
        }
    }
}

/// Flat observation: M running statuses, M part statuses, M progresses,
/// M-1 buffer levels, M robot statuses (per machine).
pub fn encode_state_vector<F: Scalar>(
    state: &SystemState,
    config: &LineConfig,
) -> Result<Vec<F>, ModelError> {
    state.check_dimensions(config)?;
    let flag = |b: bool| if b { F::one() } else { F::zero() };
    let mut out = Vec::with_capacity(config.state_len());
    out.extend(state.machines.iter().map(|m| flag(m.running)));
    out.extend(state.machines.iter().map(|m| flag(m.has_part)));
    out.extend(
        state
            .machines
            .iter()
            .zip(&config.processing_time)
            .map(|(m, &t)| m.progress::<F>(t)),
    );
    out.extend(state.buffers.iter().map(|&b| F::of(b as f64)));
    out.extend((0..config.machine_count).map(|i| flag(state.robot_at(i))));
    Ok(out)
}

/// The observable tuple carried by a state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedState<F> {
    pub running: Vec<bool>,
    pub has_part: Vec<bool>,
    pub progress: Vec<F>,
    pub buffers: Vec<u32>,
    pub robot_status: Vec<bool>,
}

impl<F: Scalar> ObservedState<F> {
    pub fn of_state(state: &SystemState, config: &LineConfig) -> Self {
        ObservedState {
            running: state.machines.iter().map(|m| m.running).collect(),
            has_part: state.machines.iter().map(|m| m.has_part).collect(),
            progress: state
                .machines
                .iter()
                .zip(&config.processing_time)
                .map(|(m, &t)| m.progress(t))
                .collect(),
            buffers: state.buffers.clone(),
            robot_status: (0..config.machine_count).map(|i| state.robot_at(i)).collect(),
        }
    }
}

/// Inverse of [`encode_state_vector`] for a line with `machines` machines.
pub fn decode_state_vector<F: Scalar>(
    vector: &[F],
    machines: usize,
) -> Result<ObservedState<F>, ModelError> {
    let expected = 5 * machines - 1;
    if vector.len() != expected {
        return Err(ModelError::DimensionMismatch {
            what: "state vector",
            got: vector.len(),
            expected,
        });
    }
    let m = machines;
    let flag = |v: F| v > F::of(0.5);
    Ok(ObservedState {
        running: vector[..m].iter().copied().map(flag).collect(),
        has_part: vector[m..2 * m].iter().copied().map(flag).collect(),
        progress: vector[2 * m..3 * m].to_vec(),
        buffers: vector[3 * m..4 * m - 1]
            .iter()
            .map(|v| v.round().to_u32().unwrap_or(0))
            .collect(),
        robot_status: vector[4 * m - 1..].iter().copied().map(flag).collect(),
    })
}
