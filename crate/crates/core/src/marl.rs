//! Multi-agent actor-critic with linear softmax policies (one per robot) and
//! a shared linear state-value critic.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    encode_state_vector, ControllerDecision, DecisionSource, JointAction, LineConfig, SystemState,
};
use crate::scalar::Scalar;
use crate::sim::{
    env_step, feasible_actions, hold_action, reset, Controller, ControllerError, RewardMode,
    SimError, StepOptions,
};

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("training diverged at episode {episode}: {detail}")]
    Diverged { episode: usize, detail: String },
    #[error("invalid hyper-parameter: {0}")]
    Hyper(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot read parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// State vector with buffer levels divided by capacity, followed by a bias of 1.
pub fn featurize<F: Scalar>(state: &SystemState, config: &LineConfig) -> Result<Vec<F>, MarlError> {
    let mut phi: Vec<F> = encode_state_vector(state, config).map_err(SimError::from)?;
    let m = config.machine_count;
    for (k, &cap) in config.buffer_capacity.iter().enumerate() {
        phi[3 * m + k] /= F::of(cap as f64);
    }
    phi.push(F::one());
    Ok(phi)
}

pub fn feature_len(config: &LineConfig) -> usize {
    config.state_len() + 1
}

/// Actor matrices (row-major, `actions x features`, one per agent) and critic weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<F> {
    pub actors: Vec<Vec<F>>,
    pub critic: Vec<F>,
    pub actions: usize,
    pub features: usize,
}

impl<F: Scalar> PolicyParams<F> {
    pub fn zeros(agents: usize, actions: usize, features: usize) -> Self {
        PolicyParams {
            actors: vec![vec![F::zero(); actions * features]; agents],
            critic: vec![F::zero(); features],
            actions,
            features,
        }
    }

    pub fn for_line(config: &LineConfig) -> Self {
        Self::zeros(config.robot_count, config.machine_count, feature_len(config))
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random(agents: usize, actions: usize, features: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || F::of(rng.random_range(-scale..=scale));
        PolicyParams {
            actors: (0..agents)
                .map(|_| (0..actions * features).map(|_| draw()).collect())
                .collect(),
            critic: (0..features).map(|_| draw()).collect(),
            actions,
            features,
        }
    }

    pub fn agents(&self) -> usize {
        self.actors.len()
    }

    pub fn is_finite(&self) -> bool {
        self.actors.iter().flatten().chain(&self.critic).all(|v| v.is_finite())
    }

    pub fn value(&self, phi: &[F]) -> F {
        dot(&self.critic, phi)
    }

    pub fn logits(&self, phi: &[F], agent: usize) -> Vec<F> {
        self.actors[agent]
            .chunks(self.features)
            .map(|row| dot(row, phi))
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> PolicyParams<G> {
        let conv = |v: &F| G::of(v.to_f64_lossy());
        PolicyParams {
            actors: self.actors.iter().map(|a| a.iter().map(conv).collect()).collect(),
            critic: self.critic.iter().map(conv).collect(),
            actions: self.actions,
            features: self.features,
        }
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>, MarlError> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(MarlError::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn policy_probs<F: Scalar>(
    params: &PolicyParams<F>,
    phi: &[F],
    agent: usize,
) -> Result<Vec<F>, MarlError> {
    if phi.len() != params.features {
        return Err(MarlError::Shape(format!(
            "feature vector has {} entries, parameters expect {}",
            phi.len(),
            params.features
        )));
    }
    softmax(&params.logits(phi, agent))
}

/// Gradient of `log pi(action | phi)` with respect to the agent's matrix.
pub fn grad_log_prob<F: Scalar>(probs: &[F], phi: &[F], action: usize) -> Vec<F> {
    probs
        .iter()
        .enumerate()
        .flat_map(|(b, &p)| {
            let indicator = if b == action { F::one() } else { F::zero() };
            phi.iter().map(move |&x| (indicator - p) * x)
        })
        .collect()
}

/// One step of experience. `actions[i]` is `None` when agent `i` was busy.
#[derive(Debug, Clone, PartialEq)]
pub struct AcTransition<F> {
    pub features: Vec<F>,
    pub actions: Vec<Option<usize>>,
    pub reward: F,
    pub next_features: Vec<F>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRates<F> {
    pub gamma: F,
    pub lr_actor: F,
    pub lr_critic: F,
}

impl<F: Scalar> UpdateRates<F> {
    fn validate(&self) -> Result<(), MarlError> {
        if !(self.gamma >= F::zero() && self.gamma < F::one()) {
            return Err(MarlError::Hyper("gamma must lie in [0, 1)".into()));
        }
        if !(self.lr_actor > F::zero() && self.lr_critic > F::zero()) {
            return Err(MarlError::Hyper("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// TD advantage `r + gamma V(s') (1 - terminal) - V(s)`.
pub fn advantage<F: Scalar>(params: &PolicyParams<F>, t: &AcTransition<F>, gamma: F) -> F {
    let bootstrap = if t.terminal {
        F::zero()
    } else {
        gamma * params.value(&t.next_features)
    };
    t.reward + bootstrap - params.value(&t.features)
}

/// Actor step along `A grad log pi` for every acting agent and critic step
/// along `A grad V`. Returns the advantage used.
pub fn ac_update<F: Scalar>(
    params: &mut PolicyParams<F>,
    transition: &AcTransition<F>,
    rates: UpdateRates<F>,
) -> Result<F, MarlError> {
    rates.validate()?;
    let adv = advantage(params, transition, rates.gamma);
    if !adv.is_finite() {
        return Err(MarlError::NonFinite("advantage"));
    }
    if adv == F::zero() {
        return Ok(adv);
    }
    let phi = &transition.features;
    for (agent, action) in transition.actions.iter().enumerate() {
        let Some(action) = *action else { continue };
        let probs = policy_probs(params, phi, agent)?;
        let grad = grad_log_prob(&probs, phi, action);
        for (w, g) in params.actors[agent].iter_mut().zip(grad) {
            *w += rates.lr_actor * adv * g;
        }
    }
    for (w, &x) in params.critic.iter_mut().zip(phi) {
        *w += rates.lr_critic * adv * x;
    }
    Ok(adv)
}

/// Enumerable feature set used by the gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallMdp<F> {
    pub states: Vec<Vec<F>>,
}

impl<F: Scalar> SmallMdp<F> {
    pub fn random(states: usize, features: usize, rng: &mut impl Rng) -> Self {
        SmallMdp {
            states: (0..states)
                .map(|_| {
                    let mut phi: Vec<F> = (0..features - 1)
                        .map(|_| F::of(rng.random_range(0.0..1.0)))
                        .collect();
                    phi.push(F::one());
                    phi
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientVariant {
    #[default]
    Analytic,
    /// Negated analytic gradient, used as a negative control.
    SignFlipped,
}

/// Max relative error between analytic gradients and central differences
/// (`h = 1e-5`) of `log pi` and `V` over every state, agent and action.
pub fn grad_check<F: Scalar>(params: &PolicyParams<F>, mdp: &SmallMdp<F>) -> Result<F, MarlError> {
    grad_check_with(params, mdp, GradientVariant::Analytic)
}

pub fn grad_check_with<F: Scalar>(
    params: &PolicyParams<F>,
    mdp: &SmallMdp<F>,
    variant: GradientVariant,
) -> Result<F, MarlError> {
    let h = F::of(1e-5);
    let two_h = h + h;
    let floor = F::of(1e-6);
    let sign = match variant {
        GradientVariant::Analytic => F::one(),
        GradientVariant::SignFlipped => -F::one(),
    };
    let rel = |a: F, n: F| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let mut worst = F::zero();
    let mut probe = params.clone();
    for phi in &mdp.states {
        for agent in 0..params.agents() {
            let probs = policy_probs(params, phi, agent)?;
            for action in 0..params.actions {
                let analytic = grad_log_prob(&probs, phi, action);
                for (k, &g) in analytic.iter().enumerate() {
                    let base = params.actors[agent][k];
                    probe.actors[agent][k] = base + h;
                    let up = policy_probs(&probe, phi, agent)?[action].ln();
                    probe.actors[agent][k] = base - h;
                    let down = policy_probs(&probe, phi, agent)?[action].ln();
                    probe.actors[agent][k] = base;
                    worst = worst.max(rel(sign * g, (up - down) / two_h));
                }
            }
        }
        for k in 0..params.features {
            let base = params.critic[k];
            probe.critic[k] = base + h;
            let up = probe.value(phi);
            probe.critic[k] = base - h;
            let down = probe.value(phi);
            probe.critic[k] = base;
            worst = worst.max(rel(sign * phi[k], (up - down) / two_h));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub seed: u64,
    pub reward: RewardMode,
    /// Sample only among feasible machines.
    pub mask_infeasible: bool,
    /// Steps per episode; the line's horizon when absent.
    pub horizon: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 2000,
            gamma: 0.95,
            lr_actor: 0.05,
            lr_critic: 0.01,
            seed: 0,
            reward: RewardMode::Delta,
            mask_infeasible: false,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<F> {
    pub params: PolicyParams<F>,
    /// Final throughput of every training episode.
    pub curve: Vec<u64>,
}

fn masked(probs: &[f64], feasible: &[bool]) -> Vec<f64> {
    let kept: Vec<f64> = probs
        .iter()
        .zip(feasible)
        .map(|(&p, &ok)| if ok { p } else { 0.0 })
        .collect();
    if kept.iter().all(|&p| p == 0.0) {
        probs.to_vec()
    } else {
        kept
    }
}

fn sample_action(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    WeightedIndex::new(probs)
        .map(|dist| dist.sample(rng))
        .unwrap_or(0)
}

pub fn train<F: Scalar>(config: &LineConfig, hyper: &TrainConfig) -> Result<TrainOutcome<F>, MarlError> {
    train_from(config, hyper, PolicyParams::for_line(config))
}

pub fn train_from<F: Scalar>(
    config: &LineConfig,
    hyper: &TrainConfig,
    mut params: PolicyParams<F>,
) -> Result<TrainOutcome<F>, MarlError> {
    let rates = UpdateRates {
        gamma: F::of(hyper.gamma),
        lr_actor: F::of(hyper.lr_actor),
        lr_critic: F::of(hyper.lr_critic),
    };
    rates.validate()?;
    let horizon = hyper.horizon.unwrap_or(config.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut curve = Vec::with_capacity(hyper.episodes);
    for episode in 0..hyper.episodes {
        let mut state = reset(config, hyper.seed.wrapping_add(episode as u64));
        let mut phi = featurize::<F>(&state, config)?;
        for t in 0..horizon {
            let mut action = hold_action(&state);
            let mut chosen = vec![None; config.robot_count];
            if state.any_idle_robot() {
                let feasible = feasible_actions(&state, config);
                for agent in state.idle_robots().collect::<Vec<_>>() {
                    let probs: Vec<f64> = policy_probs(&params, &phi, agent)?
                        .into_iter()
                        .map(Scalar::to_f64_lossy)
                        .collect();
                    let probs = if hyper.mask_infeasible {
                        masked(&probs, &feasible)
                    } else {
                        probs
                    };
                    let a = sample_action(&probs, &mut rng);
                    action.0[agent] = a;
                    chosen[agent] = Some(a);
                }
            }
            let step = env_step::<F>(&state, &action, config, hyper.reward, StepOptions::default())?;
            let next_phi = featurize::<F>(&step.next_state, config)?;
            let transition = AcTransition {
                features: phi,
                actions: chosen,
                reward: step.rewards[0],
                next_features: next_phi.clone(),
                terminal: t + 1 == horizon,
            };
            ac_update(&mut params, &transition, rates).map_err(|e| MarlError::Diverged {
                episode,
                detail: e.to_string(),
            })?;
            state = step.next_state;
            phi = next_phi;
        }
        if !params.is_finite() {
            return Err(MarlError::Diverged {
                episode,
                detail: "non-finite parameters".into(),
            });
        }
        curve.push(state.throughput());
    }
    Ok(TrainOutcome { params, curve })
}

/// Runs a trained policy: argmax (greedy) or sampled actions for idle robots.
#[derive(Debug, Clone)]
pub struct MarlController<F> {
    pub params: PolicyParams<F>,
    pub greedy: bool,
    pub mask_infeasible: bool,
    rng: ChaCha8Rng,
}

impl<F: Scalar> MarlController<F> {
    pub fn greedy(params: PolicyParams<F>) -> Self {
        MarlController {
            params,
            greedy: true,
            mask_infeasible: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn sampling(params: PolicyParams<F>, seed: u64) -> Self {
        MarlController {
            params,
            greedy: false,
            mask_infeasible: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn act(&mut self, state: &SystemState, config: &LineConfig) -> Result<JointAction, MarlError> {
        let phi = featurize::<F>(state, config)?;
        let feasible = feasible_actions(state, config);
        let mut action = hold_action(state);
        for agent in state.idle_robots().collect::<Vec<_>>() {
            let mut probs: Vec<f64> = policy_probs(&self.params, &phi, agent)?
                .into_iter()
                .map(Scalar::to_f64_lossy)
                .collect();
            if self.mask_infeasible {
                probs = masked(&probs, &feasible);
            }
            action.0[agent] = if self.greedy {
                argmax(&probs)
            } else {
                sample_action(&probs, &mut self.rng)
            };
        }
        Ok(action)
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl<F: Scalar> Controller for MarlController<F> {
    fn name(&self) -> String {
        "marl".to_string()
    }

    fn decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, ControllerError> {
        Ok(ControllerDecision::new(self.act(state, config)?, DecisionSource::Marl))
    }

    fn begin_episode(&mut self, seed: u64) {
        if !self.greedy {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
    }
}

/// Text layout: a header `agents actions features`, then every actor entry
/// (agent-major, row-major), then the critic, one number per line.
pub fn params_to_text<F: Scalar>(params: &PolicyParams<F>) -> String {
    let mut out = format!(
        "{} {} {}\n",
        params.agents(),
        params.actions,
        params.features
    );
    for v in params.actors.iter().flatten().chain(&params.critic) {
        let _ = writeln!(out, "{:?}", v.to_f64_lossy());
    }
    out
}

pub fn params_from_text<F: Scalar>(text: &str) -> Result<PolicyParams<F>, MarlError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| MarlError::Format("empty file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| MarlError::Format(format!("header: {e}")))?;
    let [agents, actions, features] = dims[..] else {
        return Err(MarlError::Format("header needs three integers".into()));
    };
    let values: Vec<F> = lines
        .map(|l| l.trim().parse::<f64>().map(F::of))
        .collect::<Result<_, _>>()
        .map_err(|e| MarlError::Format(e.to_string()))?;
    let actor_len = actions * features;
    if values.len() != agents * actor_len + features {
        return Err(MarlError::Format(format!(
            "expected {} numbers, found {}",
            agents * actor_len + features,
            values.len()
        )));
    }
    let (actor_values, critic) = values.split_at(agents * actor_len);
    let params = PolicyParams {
        actors: actor_values.chunks(actor_len).map(<[F]>::to_vec).collect(),
        critic: critic.to_vec(),
        actions,
        features,
    };
    if !params.is_finite() {
        return Err(MarlError::NonFinite("parameter in file"));
    }
    Ok(params)
}

pub fn save_params<F: Scalar>(params: &PolicyParams<F>, path: &Path) -> Result<(), MarlError> {
    std::fs::write(path, params_to_text(params))?;
    Ok(())
}

pub fn load_params<F: Scalar>(path: &Path) -> Result<PolicyParams<F>, MarlError> {
    params_from_text(&std::fs::read_to_string(path)?)
}

/// Learning curve as `episode,throughput` rows.
pub fn curve_csv(curve: &[u64]) -> String {
    let mut out = String::from("episode,throughput\n");
    for (episode, y) in curve.iter().enumerate() {
        let _ = writeln!(out, "{episode},{y}");
    }
    out
}
