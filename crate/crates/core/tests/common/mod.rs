//! Hand-written reference stepper for failure-free lines with one-minute
//! steps. It shares no code with the library engine and is used as an
//! oracle for it.
#![allow(dead_code)]

pub mod fixtures;

use std::collections::HashMap;

use robotline::model::Phase;
use robotline::{JointAction, LineConfig, SystemState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Unload,
    Load,
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Robot {
    Idle,
    Busy { machine: usize, op: Op, left: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RefState {
    pub part: Vec<bool>,
    pub done: Vec<bool>,
    pub work: Vec<u32>,
    pub seg: Vec<u32>,
    pub out: Vec<u64>,
    pub robots: Vec<Robot>,
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub t: Vec<u32>,
    pub cap: Vec<u32>,
    pub handling: u32,
    pub release: u32,
    pub wip_cap: Option<u32>,
}

impl Reference {
    pub fn new(config: &LineConfig, wip_cap: Option<u32>) -> Self {
        assert_eq!(config.step_minutes, 1);
        assert!(!config.has_failures());
        Reference {
            t: config.processing_time.clone(),
            cap: config.buffer_capacity.clone(),
            handling: config.handling_time,
            release: config.release_time,
            wip_cap,
        }
    }

    fn m(&self) -> usize {
        self.t.len()
    }

    pub fn initial(&self, config: &LineConfig, robots: usize) -> RefState {
        RefState {
            part: vec![false; self.m()],
            done: vec![false; self.m()],
            work: vec![0; self.m()],
            seg: config.initial_buffer.clone(),
            out: vec![0; self.m()],
            robots: vec![Robot::Idle; robots],
        }
    }

    fn occupied(s: &RefState, i: usize) -> bool {
        s.robots
            .iter()
            .any(|r| matches!(r, Robot::Busy { machine, .. } if *machine == i))
    }

    fn loading(s: &RefState, i: usize) -> bool {
        s.robots
            .iter()
            .any(|r| matches!(r, Robot::Busy { machine, op: Op::Load, .. } if *machine == i))
    }

    fn in_line(s: &RefState) -> u64 {
        let first = s.part[0] || Self::loading(s, 0);
        u64::from(first) + s.seg.iter().map(|&b| b as u64).sum::<u64>()
    }

    fn supply(&self, s: &RefState, i: usize) -> bool {
        if i == 0 {
            self.wip_cap.is_none_or(|c| Self::in_line(s) < c as u64)
        } else {
            let here = u32::from(s.part[i] || Self::loading(s, i));
            s.seg[i - 1] > here
        }
    }

    pub fn can_serve(&self, s: &RefState, i: usize) -> bool {
        if Self::occupied(s, i) {
            return false;
        }
        if i + 1 < self.m() && s.seg[i] >= self.cap[i] {
            return false;
        }
        if s.part[i] {
            s.done[i]
        } else {
            self.supply(s, i)
        }
    }

    fn after_handling(&self, machine: usize) -> Robot {
        if self.release == 0 {
            Robot::Idle
        } else {
            Robot::Busy {
                machine,
                op: Op::Release,
                left: self.release,
            }
        }
    }

    pub fn step(&self, s: &RefState, targets: &[usize]) -> RefState {
        let m = self.m();
        let open: Vec<bool> = (0..m).map(|i| self.can_serve(s, i)).collect();
        let mut n = s.clone();
        let mut claimed = vec![false; m];
        for (r, &target) in targets.iter().enumerate() {
            if n.robots[r] != Robot::Idle || claimed[target] || !open[target] {
                continue;
            }
            claimed[target] = true;
            let op = if n.part[target] { Op::Unload } else { Op::Load };
            n.robots[r] = Robot::Busy {
                machine: target,
                op,
                left: self.handling,
            };
        }
        for i in 0..m {
            if n.part[i] && !n.done[i] {
                n.work[i] += 1;
                n.done[i] = n.work[i] >= self.t[i];
            }
        }
        for r in 0..n.robots.len() {
            let Robot::Busy { machine, op, left } = n.robots[r] else {
                continue;
            };
            if left > 1 {
                n.robots[r] = Robot::Busy {
                    machine,
                    op,
                    left: left - 1,
                };
                continue;
            }
            n.robots[r] = match op {
                Op::Unload => {
                    n.out[machine] += 1;
                    if machine + 1 < m {
                        n.seg[machine] += 1;
                    }
                    if machine > 0 {
                        n.seg[machine - 1] -= 1;
                    }
                    n.part[machine] = false;
                    n.done[machine] = false;
                    n.work[machine] = 0;
                    // the robot itself is still parked here, so the machine counts as empty
                    n.robots[r] = Robot::Idle;
                    if self.supply(&n, machine) {
                        Robot::Busy {
                            machine,
                            op: Op::Load,
                            left: self.handling,
                        }
                    } else {
                        self.after_handling(machine)
                    }
                }
                Op::Load => {
                    n.part[machine] = true;
                    n.done[machine] = false;
                    n.work[machine] = 0;
                    self.after_handling(machine)
                }
                Op::Release => Robot::Idle,
            };
        }
        n
    }
}

/// The library state seen through the reference's fields.
pub fn project(state: &SystemState) -> RefState {
    RefState {
        part: state.machines.iter().map(|m| m.has_part).collect(),
        done: state.machines.iter().map(|m| m.finished).collect(),
        work: state.machines.iter().map(|m| m.work_done).collect(),
        seg: state.buffers.clone(),
        out: state.produced.clone(),
        robots: state
            .robots
            .iter()
            .map(|r| match r.assigned_machine {
                None => Robot::Idle,
                Some(machine) => Robot::Busy {
                    machine,
                    op: match r.pending_phase {
                        Phase::Unload => Op::Unload,
                        Phase::Load => Op::Load,
                        Phase::Release | Phase::None => Op::Release,
                    },
                    left: r.busy_remaining,
                },
            })
            .collect(),
    }
}

/// Every joint action over the idle robots (busy robots keep their machine).
pub fn joint_choices(s: &RefState, machines: usize) -> Vec<Vec<usize>> {
    let mut choices = vec![Vec::new()];
    for robot in &s.robots {
        let options: Vec<usize> = match robot {
            Robot::Busy { machine, .. } => vec![*machine],
            Robot::Idle => (0..machines).collect(),
        };
        choices = choices
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |&o| {
                    let mut next = prefix.clone();
                    next.push(o);
                    next
                })
            })
            .collect();
    }
    choices
}

/// Best final throughput over every joint-action sequence of length
/// `horizon`, explored breadth-first with duplicate states merged. Each
/// transition is computed by both the library and the reference, and the
/// two must agree.
pub fn brute_force_optimum(config: &LineConfig, horizon: usize) -> Result<u64, String> {
    let reference = Reference::new(config, None);
    let lib_start = robotline::sim::reset(config, config.seed);
    let start = reference.initial(config, config.robot_count);
    if project(&lib_start) != start {
        return Err("initial states differ".into());
    }
    let mut frontier: HashMap<RefState, SystemState> = HashMap::from([(start, lib_start)]);
    for t in 0..horizon {
        let mut next: HashMap<RefState, SystemState> = HashMap::new();
        for (ref_state, lib_state) in &frontier {
            for targets in joint_choices(ref_state, config.machine_count) {
                let expected = reference.step(ref_state, &targets);
                let (lib_next, _) = robotline::step(lib_state, &JointAction(targets.clone()), config)
                    .map_err(|e| e.to_string())?;
                let seen = project(&lib_next);
                if seen != expected {
                    return Err(format!(
                        "step {t}, action {targets:?}: library {seen:?} != reference {expected:?}"
                    ));
                }
                next.entry(expected).or_insert(lib_next);
            }
        }
        frontier = next;
    }
    Ok(frontier
        .keys()
        .map(|s| s.out[config.machine_count - 1])
        .max()
        .unwrap_or(0))
}
