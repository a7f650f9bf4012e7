//! Simulation and control of robot-served serial production lines.

pub mod bench;
pub mod heuristics;
pub mod llm;
pub mod marl;
pub mod model;
pub mod scalar;
pub mod sim;

pub use model::{
    load_config, ConfigError, ControllerDecision, DecisionSource, JointAction, LineConfig,
    SystemState,
};
pub use scalar::Scalar;
pub use sim::{run_episode, step, Controller, EpisodeTrace};

/// Default scalar for observations and learner weights.
pub type Real = f64;
pub type PolicyParamsF64 = marl::PolicyParams<f64>;
pub type PolicyParamsF32 = marl::PolicyParams<f32>;
