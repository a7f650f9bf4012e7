//! Discrete-time line engine: failures, dispatch validation, processing and
//! robot handling, plus the flow-conservation checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    encode_state_vector, ControllerDecision, DecisionSource, JointAction, LineConfig,
    MachineState, ModelError, Phase, RobotState, SystemState,
};
use crate::scalar::Scalar;

pub type ControllerError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("machines i and j must differ (got {0} twice)")]
    SameMachine(usize),
    #[error("buffer index {0} out of range")]
    BufferOutOfRange(usize),
    #[error("boundary violated: segment argument {0} is positive")]
    Boundary(f64),
    #[error("invariant violated at minute {clock}: {detail}")]
    Invariant { clock: u64, detail: String },
    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: ControllerError,
    },
}

/// Per-machine failure stream. Up-times follow Exp(MTBF) and repair times
/// Exp(MTTR), drawn lazily from a ChaCha stream keyed by (seed, machine).
#[derive(Debug, Clone, PartialEq)]
pub struct DowntimeSchedule {
    rng: ChaCha8Rng,
    mtbf: f64,
    mttr: f64,
}

impl DowntimeSchedule {
    pub fn new(seed: u64, machine: usize, mtbf: f64, mttr: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(machine as u64);
        DowntimeSchedule { rng, mtbf, mttr }
    }

    fn draw(&mut self, mean: f64) -> f64 {
        let exp = Exp::new(1.0 / mean).expect("mean validated positive");
        exp.sample(&mut self.rng).max(f64::MIN_POSITIVE)
    }

    pub fn next_uptime(&mut self) -> f64 {
        self.draw(self.mtbf)
    }

    pub fn next_repair(&mut self) -> f64 {
        self.draw(self.mttr)
    }
}

/// Initial state: buffers at their initial levels, machines up and empty,
/// robots idle, counters zero. `seed` keys the failure streams.
pub fn reset(config: &LineConfig, seed: u64) -> SystemState {
    let m = config.machine_count;
    let mut machines = vec![MachineState::idle(); m];
    let mut downtime = Vec::new();
    if let (Some(mtbf), Some(mttr)) = (&config.mtbf, &config.mttr) {
        for (i, machine) in machines.iter_mut().enumerate() {
            let mut schedule = DowntimeSchedule::new(seed, i, mtbf[i], mttr[i]);
            machine.next_failure_at = Some(schedule.next_uptime());
            downtime.push(schedule);
        }
    }
    SystemState {
        clock: 0,
        machines,
        buffers: config.initial_buffer.clone(),
        robots: vec![RobotState::idle(); config.robot_count],
        produced: vec![0; m],
        downtime,
    }
}

/// Segment function: `+inf` for `u < 0`, `v` for `u = 0`, error for `u > 0`.
pub fn segment_xi<F: Scalar>(u: F, v: F) -> Result<F, SimError> {
    if u < F::zero() {
        Ok(F::infinity())
    } else if u == F::zero() {
        Ok(v)
    } else {
        Err(SimError::Boundary(u.to_f64_lossy()))
    }
}

fn check_pair(config: &LineConfig, i: usize, j: usize) -> Result<(), SimError> {
    config.check_machine(i)?;
    config.check_machine(j)?;
    if i == j {
        return Err(SimError::SameMachine(i));
    }
    Ok(())
}

/// `X_i - X_j` reconstructed from buffer levels alone.
pub fn production_difference(
    state: &SystemState,
    config: &LineConfig,
    i: usize,
    j: usize,
) -> Result<i64, SimError> {
    check_pair(config, i, j)?;
    let (lo, hi, sign) = if i < j { (i, j, 1) } else { (j, i, -1) };
    let delta: i64 = (lo..hi)
        .map(|k| state.buffers[k] as i64 - config.initial_buffer[k] as i64)
        .sum();
    Ok(sign * delta)
}

/// Upper bound on `X_i - X_j` imposed by the buffers between the two machines.
pub fn boundary(config: &LineConfig, i: usize, j: usize) -> Result<i64, SimError> {
    check_pair(config, i, j)?;
    let between = |lo: usize, hi: usize| lo..hi;
    Ok(if i > j {
        between(j, i)
            .map(|k| config.initial_buffer[k] as i64)
            .sum()
    } else {
        between(i, j)
            .map(|k| config.buffer_capacity[k] as i64 - config.initial_buffer[k] as i64)
            .sum()
    })
}

/// Expected level of buffer `k` (0-based, between machines `k` and `k + 1`)
/// from the cumulative counters: `X_k - X_{k+1} + b_k(0)`.
pub fn buffer_level_identity(
    state: &SystemState,
    config: &LineConfig,
    k: usize,
) -> Result<i64, SimError> {
    if k >= config.buffer_count() {
        return Err(SimError::BufferOutOfRange(k));
    }
    Ok(state.produced[k] as i64 - state.produced[k + 1] as i64 + config.initial_buffer[k] as i64)
}

fn admits_new_part(state: &SystemState, wip_cap: Option<u32>) -> bool {
    wip_cap.is_none_or(|cap| state.parts_in_system() < cap as u64)
}

/// Whether an idle robot may be dispatched to machine `i` right now.
pub fn is_feasible(
    state: &SystemState,
    config: &LineConfig,
    i: usize,
    wip_cap: Option<u32>,
) -> bool {
    let machine = &state.machines[i];
    let last = i + 1 == config.machine_count;
    if !last && state.buffers[i] >= config.buffer_capacity[i] {
        return false;
    }
    if state.robot_at(i) || !machine.running || machine.is_processing() {
        return false;
    }
    if !machine.has_part {
        return match state.waiting_parts(i) {
            Some(waiting) => waiting > 0,
            None => admits_new_part(state, wip_cap),
        };
    }
    true
}

/// Per-machine feasibility flags.
pub fn feasible_actions(state: &SystemState, config: &LineConfig) -> Vec<bool> {
    feasible_actions_with(state, config, None)
}

pub fn feasible_actions_with(
    state: &SystemState,
    config: &LineConfig,
    wip_cap: Option<u32>,
) -> Vec<bool> {
    (0..config.machine_count)
        .map(|i| is_feasible(state, config, i, wip_cap))
        .collect()
}

/// Indices of feasible machines in ascending order.
pub fn feasible_machines(
    state: &SystemState,
    config: &LineConfig,
    wip_cap: Option<u32>,
) -> Vec<usize> {
    (0..config.machine_count)
        .filter(|&i| is_feasible(state, config, i, wip_cap))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Infeasible,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub robot: usize,
    pub machine: usize,
    pub reason: RejectReason,
}

/// What happened during one timestep. Pairs are `(robot, machine)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    /// Accepted dispatches of idle robots.
    pub dispatches: Vec<(usize, usize)>,
    /// Completed load operations.
    pub loads: Vec<(usize, usize)>,
    /// Completed unload operations.
    pub unloads: Vec<(usize, usize)>,
    /// Machines that finished processing a part.
    pub completions: Vec<usize>,
    pub failures: Vec<usize>,
    pub repairs: Vec<usize>,
    pub rejected_actions: Vec<Rejection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepOptions {
    /// Maximum number of parts allowed inside the line; raw material is
    /// only released into machine 1 while the count is below the cap.
    pub wip_cap: Option<u32>,
}

pub fn step(
    state: &SystemState,
    action: &JointAction,
    config: &LineConfig,
) -> Result<(SystemState, StepEvents), SimError> {
    step_with(state, action, config, StepOptions::default())
}

pub fn step_with(
    state: &SystemState,
    action: &JointAction,
    config: &LineConfig,
    options: StepOptions,
) -> Result<(SystemState, StepEvents), SimError> {
    let mut next = state.clone();
    let events = advance(&mut next, action, config, options)?;
    Ok((next, events))
}

/// In-place variant of [`step_with`].
pub fn advance(
    state: &mut SystemState,
    action: &JointAction,
    config: &LineConfig,
    options: StepOptions,
) -> Result<StepEvents, SimError> {
    action.validate(config)?;
    state.check_dimensions(config)?;
    let minutes = config.step_minutes;
    let mut events = StepEvents::default();

    update_failures(state, minutes, &mut events);
    dispatch(state, action, config, options.wip_cap, &mut events);

    for (i, machine) in state.machines.iter_mut().enumerate() {
        if machine.running && machine.is_processing() {
            machine.work_done += minutes;
            if machine.work_done >= config.processing_time[i] {
                machine.finished = true;
                events.completions.push(i);
            }
        }
    }

    for k in 0..state.robots.len() {
        handle_robot(state, k, config, options.wip_cap, &mut events);
    }

    state.clock += minutes as u64;
    Ok(events)
}

fn update_failures(state: &mut SystemState, minutes: u32, events: &mut StepEvents) {
    if state.downtime.is_empty() {
        return;
    }
    let window_end = (state.clock + minutes as u64) as f64;
    for (i, (machine, schedule)) in state
        .machines
        .iter_mut()
        .zip(state.downtime.iter_mut())
        .enumerate()
    {
        if machine.running {
            if machine.next_failure_at.is_some_and(|at| at < window_end) {
                machine.running = false;
                machine.repair_remaining = schedule.next_repair();
                machine.next_failure_at = None;
                events.failures.push(i);
            }
        } else {
            machine.repair_remaining -= minutes as f64;
            if machine.repair_remaining <= 0.0 {
                machine.running = true;
                machine.repair_remaining = 0.0;
                machine.next_failure_at = Some(window_end + schedule.next_uptime());
                events.repairs.push(i);
            }
        }
    }
}

fn dispatch(
    state: &mut SystemState,
    action: &JointAction,
    config: &LineConfig,
    wip_cap: Option<u32>,
    events: &mut StepEvents,
) {
    let feasible = feasible_actions_with(state, config, wip_cap);
    let mut taken = vec![false; config.machine_count];
    for (robot, &machine) in action.targets().iter().enumerate() {
        if !state.robots[robot].is_idle() {
            continue;
        }
        let reason = if taken[machine] {
            Some(RejectReason::Duplicate)
        } else if !feasible[machine] {
            Some(RejectReason::Infeasible)
        } else {
            None
        };
        if let Some(reason) = reason {
            events.rejected_actions.push(Rejection {
                robot,
                machine,
                reason,
            });
            continue;
        }
        taken[machine] = true;
        let phase = if state.machines[machine].has_part {
            Phase::Unload
        } else {
            Phase::Load
        };
        state.robots[robot] = RobotState {
            assigned_machine: Some(machine),
            busy_remaining: config.handling_time,
            pending_phase: phase,
        };
        events.dispatches.push((robot, machine));
    }
}

fn handle_robot(
    state: &mut SystemState,
    k: usize,
    config: &LineConfig,
    wip_cap: Option<u32>,
    events: &mut StepEvents,
) {
    let mut budget = config.step_minutes;
    while budget > 0 {
        let Some(i) = state.robots[k].assigned_machine else {
            return;
        };
        let robot = &mut state.robots[k];
        let used = budget.min(robot.busy_remaining);
        robot.busy_remaining -= used;
        budget -= used;
        if robot.busy_remaining > 0 {
            return;
        }
        match robot.pending_phase {
            Phase::Unload => {
                state.produced[i] += 1;
                if i + 1 < config.machine_count {
                    state.buffers[i] += 1;
                }
                if i > 0 {
                    state.buffers[i - 1] -= 1;
                }
                state.machines[i].has_part = false;
                state.machines[i].finished = false;
                state.machines[i].work_done = 0;
                events.unloads.push((k, i));
                let reload = match state.waiting_parts(i) {
                    Some(waiting) => waiting > 0,
                    None => admits_new_part(state, wip_cap),
                };
                if reload {
                    set_phase(&mut state.robots[k], Phase::Load, config.handling_time);
                } else {
                    release(&mut state.robots[k], config.release_time);
                }
            }
            Phase::Load => {
                let machine = &mut state.machines[i];
                machine.has_part = true;
                machine.finished = false;
                machine.work_done = 0;
                events.loads.push((k, i));
                release(&mut state.robots[k], config.release_time);
            }
            Phase::Release | Phase::None => {
                *robot = RobotState::idle();
            }
        }
    }
}

fn set_phase(robot: &mut RobotState, phase: Phase, minutes: u32) {
    robot.pending_phase = phase;
    robot.busy_remaining = minutes;
}

fn release(robot: &mut RobotState, minutes: u32) {
    if minutes == 0 {
        *robot = RobotState::idle();
    } else {
        set_phase(robot, Phase::Release, minutes);
    }
}

/// Checks conservation of flow, buffer bounds, the production-difference
/// bound and (given the previous state) monotonicity of the counters.
pub fn check_invariants(
    previous: Option<&SystemState>,
    state: &SystemState,
    config: &LineConfig,
) -> Result<(), SimError> {
    let fail = |detail: String| SimError::Invariant {
        clock: state.clock,
        detail,
    };
    state.check_dimensions(config)?;
    for (k, (&level, &cap)) in state.buffers.iter().zip(&config.buffer_capacity).enumerate() {
        if level > cap {
            return Err(fail(format!("buffer {k} holds {level} > capacity {cap}")));
        }
        let expected = buffer_level_identity(state, config, k)?;
        if expected != level as i64 {
            return Err(fail(format!(
                "buffer {k} stores {level} but counters imply {expected}"
            )));
        }
    }
    let m = config.machine_count;
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            let tau = production_difference(state, config, i, j)?;
            let counted = state.produced[i] as i64 - state.produced[j] as i64;
            if tau != counted {
                return Err(fail(format!(
                    "tau({i},{j}) = {tau} disagrees with counters ({counted})"
                )));
            }
            let beta = boundary(config, i, j)?;
            segment_xi((tau - beta) as f64, 0.0)
                .map_err(|_| fail(format!("tau({i},{j}) = {tau} exceeds bound {beta}")))?;
        }
    }
    for (i, machine) in state.machines.iter().enumerate() {
        if machine.running == (machine.repair_remaining > 0.0) {
            return Err(fail(format!("machine {i} running flag disagrees with repair clock")));
        }
        if machine.progress::<f64>(config.processing_time[i]) > 0.0 && !machine.has_part {
            return Err(fail(format!("machine {i} shows progress without a part")));
        }
    }
    for (k, robot) in state.robots.iter().enumerate() {
        if robot.busy_remaining > 0 && robot.assigned_machine.is_none() {
            return Err(fail(format!("robot {k} busy without an assignment")));
        }
    }
    if let Some(prev) = previous {
        for (i, (&now, &before)) in state.produced.iter().zip(&prev.produced).enumerate() {
            if now < before {
                return Err(fail(format!("X_{i} decreased from {before} to {now}")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Every agent receives the cumulative throughput `Y(t)`.
    #[default]
    Cumulative,
    /// Every agent receives `Y(t) - Y(t-1)`.
    Delta,
}

#[derive(Debug, Clone)]
pub struct Transition<F> {
    pub observation: Vec<F>,
    pub rewards: Vec<F>,
    pub next_state: SystemState,
    pub events: StepEvents,
}

/// Environment interface for learning agents: one agent per robot, shared reward.
pub fn env_step<F: Scalar>(
    state: &SystemState,
    action: &JointAction,
    config: &LineConfig,
    reward: RewardMode,
    options: StepOptions,
) -> Result<Transition<F>, SimError> {
    let (next_state, events) = step_with(state, action, config, options)?;
    let observation = encode_state_vector(&next_state, config)?;
    let value = match reward {
        RewardMode::Cumulative => next_state.throughput() as f64,
        RewardMode::Delta => (next_state.throughput() - state.throughput()) as f64,
    };
    Ok(Transition {
        observation,
        rewards: vec![F::of(value); config.robot_count],
        next_state,
        events,
    })
}

/// A dispatch policy queried whenever at least one robot is idle.
pub trait Controller {
    fn name(&self) -> String;

    fn decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, ControllerError>;

    /// Release cap applied by the simulator while this controller runs.
    fn wip_cap(&self) -> Option<u32> {
        None
    }

    /// Called once before each episode.
    fn begin_episode(&mut self, _seed: u64) {}
}

impl<C: Controller + ?Sized> Controller for Box<C> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, ControllerError> {
        (**self).decide(state, config)
    }
    fn wip_cap(&self) -> Option<u32> {
        (**self).wip_cap()
    }
    fn begin_episode(&mut self, seed: u64) {
        (**self).begin_episode(seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Clock at the start of the step.
    pub clock: u64,
    /// Action returned by the controller, absent when every robot was busy.
    pub requested: Option<JointAction>,
    pub source: Option<DecisionSource>,
    pub rationale: Option<String>,
    pub events: StepEvents,
    /// State after the step.
    pub state: SystemState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub config_name: String,
    pub controller: String,
    pub seed: u64,
    /// Processing minutes per machine, for reporting progress fractions.
    pub processing_time: Vec<u32>,
    pub records: Vec<StepRecord>,
    pub throughput: u64,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Throughput after each step.
    pub fn throughput_series(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.state.throughput()).collect()
    }
}

/// Joint action that keeps busy robots on their machines and parks idle
/// robots on the placeholder.
pub fn hold_action(state: &SystemState) -> JointAction {
    JointAction(
        state
            .robots
            .iter()
            .map(|r| r.assigned_machine.unwrap_or(0))
            .collect(),
    )
}

pub fn run_episode<C: Controller + ?Sized>(
    config: &LineConfig,
    controller: &mut C,
    seed: u64,
    horizon: usize,
) -> Result<EpisodeTrace, SimError> {
    controller.begin_episode(seed);
    let options = StepOptions {
        wip_cap: controller.wip_cap(),
    };
    let mut state = reset(config, seed);
    let mut records = Vec::with_capacity(horizon);
    for step_index in 0..horizon {
        let clock = state.clock;
        let (action, requested, source, rationale) = if state.any_idle_robot() {
            let decision = controller
                .decide(&state, config)
                .map_err(|source| SimError::Controller {
                    step: step_index,
                    source,
                })?;
            (
                decision.joint_action.clone(),
                Some(decision.joint_action),
                Some(decision.source),
                decision.rationale,
            )
        } else {
            (hold_action(&state), None, None, None)
        };
        let previous = state.clone();
        let events = advance(&mut state, &action, config, options)?;
        check_invariants(Some(&previous), &state, config)?;
        records.push(StepRecord {
            step: step_index,
            clock,
            requested,
            source,
            rationale,
            events,
            state: state.clone(),
        });
    }
    Ok(EpisodeTrace {
        config_name: config.name.clone(),
        controller: controller.name(),
        seed,
        processing_time: config.processing_time.clone(),
        throughput: state.throughput(),
        records,
    })
}
