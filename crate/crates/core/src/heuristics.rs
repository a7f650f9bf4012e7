//! Baseline dispatch rules and the downstream-first priority controller.

use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControllerDecision, DecisionSource, JointAction, LineConfig, SystemState};
use crate::sim::{feasible_machines, Controller, ControllerError};

/// How the heuristics release raw material into the line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    /// A new part enters machine 1 only once the previous one has left the line.
    #[default]
    OnePartInFlight,
    /// Robots are assigned to any feasible machine, machine 1 included.
    Sequential,
}

impl Admission {
    pub fn wip_cap(self) -> Option<u32> {
        match self {
            Admission::OnePartInFlight => Some(1),
            Admission::Sequential => None,
        }
    }
}

/// Assigns idle robots, in robot order, to `ranked` machines. Busy robots keep
/// their machine; unmatched idle robots get the `(0,0)` placeholder.
fn assign(state: &SystemState, ranked: &[usize]) -> JointAction {
    let mut queue = ranked.iter().copied();
    JointAction(
        state
            .robots
            .iter()
            .map(|robot| match robot.assigned_machine {
                Some(machine) => machine,
                None => queue.next().unwrap_or(0),
            })
            .collect(),
    )
}

pub fn fcfs_decide(state: &SystemState, config: &LineConfig) -> ControllerDecision {
    fcfs_decide_with(state, config, Admission::Sequential)
}

pub fn fcfs_decide_with(
    state: &SystemState,
    config: &LineConfig,
    admission: Admission,
) -> ControllerDecision {
    let ranked = feasible_machines(state, config, admission.wip_cap());
    ControllerDecision::new(assign(state, &ranked), DecisionSource::Fcfs)
}

pub fn spt_decide(state: &SystemState, config: &LineConfig) -> ControllerDecision {
    spt_decide_with(state, config, Admission::Sequential)
}

pub fn spt_decide_with(
    state: &SystemState,
    config: &LineConfig,
    admission: Admission,
) -> ControllerDecision {
    let mut ranked = feasible_machines(state, config, admission.wip_cap());
    ranked.sort_by_key(|&i| (config.processing_time[i], i));
    ControllerDecision::new(assign(state, &ranked), DecisionSource::Spt)
}

pub fn lpt_decide(state: &SystemState, config: &LineConfig) -> ControllerDecision {
    lpt_decide_with(state, config, Admission::Sequential)
}

pub fn lpt_decide_with(
    state: &SystemState,
    config: &LineConfig,
    admission: Admission,
) -> ControllerDecision {
    let mut ranked = feasible_machines(state, config, admission.wip_cap());
    ranked.sort_by_key(|&i| (Reverse(config.processing_time[i]), i));
    ControllerDecision::new(assign(state, &ranked), DecisionSource::Lpt)
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("priority table {order:?} is not a permutation of 0..{machines}")]
pub struct PriorityError {
    pub order: Vec<usize>,
    pub machines: usize,
}

/// Machine indices ordered from highest to lowest priority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityTable(Vec<usize>);

impl PriorityTable {
    pub fn new(order: Vec<usize>, machines: usize) -> Result<Self, PriorityError> {
        let mut seen = vec![false; machines];
        let valid = order.len() == machines
            && order
                .iter()
                .all(|&i| i < machines && !std::mem::replace(&mut seen[i], true));
        if valid {
            Ok(PriorityTable(order))
        } else {
            Err(PriorityError { order, machines })
        }
    }

    /// Last machine first, then upstream in turn.
    pub fn downstream_first(machines: usize) -> Self {
        PriorityTable((0..machines).rev().collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }
}

pub fn rule_priority_decide(
    state: &SystemState,
    config: &LineConfig,
    priorities: &PriorityTable,
) -> ControllerDecision {
    let feasible = crate::sim::feasible_actions(state, config);
    let ranked: Vec<usize> = priorities
        .order()
        .iter()
        .copied()
        .filter(|&i| feasible[i])
        .collect();
    ControllerDecision::new(assign(state, &ranked), DecisionSource::RulePriority)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    Fcfs,
    Spt,
    Lpt,
}

/// FCFS, SPT or LPT as a [`Controller`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heuristic {
    pub kind: HeuristicKind,
    pub admission: Admission,
}

impl Heuristic {
    pub fn new(kind: HeuristicKind) -> Self {
        Heuristic {
            kind,
            admission: Admission::default(),
        }
    }

    pub fn with_admission(kind: HeuristicKind, admission: Admission) -> Self {
        Heuristic { kind, admission }
    }

    pub fn decide_now(&self, state: &SystemState, config: &LineConfig) -> ControllerDecision {
        match self.kind {
            HeuristicKind::Fcfs => fcfs_decide_with(state, config, self.admission),
            HeuristicKind::Spt => spt_decide_with(state, config, self.admission),
            HeuristicKind::Lpt => lpt_decide_with(state, config, self.admission),
        }
    }
}

impl Controller for Heuristic {
    fn name(&self) -> String {
        let base = match self.kind {
            HeuristicKind::Fcfs => "fcfs",
            HeuristicKind::Spt => "spt",
            HeuristicKind::Lpt => "lpt",
        };
        match self.admission {
            Admission::OnePartInFlight => base.to_string(),
            Admission::Sequential => format!("{base}-sequential"),
        }
    }

    fn decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, ControllerError> {
        Ok(self.decide_now(state, config))
    }

    fn wip_cap(&self) -> Option<u32> {
        self.admission.wip_cap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RulePriority {
    pub priorities: Option<PriorityTable>,
}

impl RulePriority {
    pub fn new() -> Self {
        RulePriority { priorities: None }
    }

    pub fn with_table(table: PriorityTable) -> Self {
        RulePriority {
            priorities: Some(table),
        }
    }

    pub fn decide_now(&self, state: &SystemState, config: &LineConfig) -> ControllerDecision {
        match &self.priorities {
            Some(table) => rule_priority_decide(state, config, table),
            None => rule_priority_decide(
                state,
                config,
                &PriorityTable::downstream_first(config.machine_count),
            ),
        }
    }
}

impl Default for RulePriority {
    fn default() -> Self {
        Self::new()
    }
}

impl Controller for RulePriority {
    fn name(&self) -> String {
        "rule".to_string()
    }

    fn decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, ControllerError> {
        Ok(self.decide_now(state, config))
    }
}
