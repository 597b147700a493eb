//! Batched rollouts, gradient estimation and optimization of control policies.
//!
//! A training step rolls out a batch of episodes with the current agent,
//! recording each one on its own tape. The gradient of the batch loss
//! combines the pathwise derivative through every differentiable quantity
//! with score-function terms for the discrete random draws (measurement
//! outcomes and resampling indices), each weighted by the downstream loss
//! it influences minus a leave-one-out baseline.

pub mod loss;
pub mod tasks;

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Agent, AgentKind, InputMode, Query};
use crate::autodiff::{Real, Tape, Var};
use crate::particle_filter::{FilterError, ResamplingGradient, DEFAULT_ESS_THRESHOLD, DEFAULT_JITTER_SCALE};
use crate::rng::{derive_seed, purpose, Rng};

pub use loss::{EtaForm, LossMode};
pub use tasks::{BsClassifierTask, DolinarTask, MultiphaseTask, NvTask, QmlTask};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{0}")]
    Invalid(String),
    #[error("strategy '{policy}' is not available for the {task} task")]
    Unsupported { task: &'static str, policy: String },
    #[error("agent {kind} with {outputs} outputs does not fit the {task} task (needs {needed})")]
    AgentShape { task: &'static str, kind: AgentKind, outputs: usize, needed: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("could not start the worker pool: {0}")]
    Pool(String),
    #[error("every episode of the batch at step {0} was aborted")]
    EmptyBatch(usize),
    #[error("{0}")]
    Observer(String),
}

/// Particle-filter settings shared by the continuous tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSettings {
    pub particles: usize,
    pub ess_threshold: f64,
    pub jitter_scale: f64,
    pub sigma_cap: f64,
    pub resampling_gradient: ResamplingGradient,
    /// Treats the agent inputs as constants when differentiating, which cuts
    /// the path from earlier controls through the posterior into later ones.
    pub stop_input_gradient: bool,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            particles: 480,
            ess_threshold: DEFAULT_ESS_THRESHOLD,
            jitter_scale: DEFAULT_JITTER_SCALE,
            sigma_cap: crate::agents::SIGMA_CAP,
            resampling_gradient: ResamplingGradient::default(),
            stop_input_gradient: false,
        }
    }
}

/// The consumed resource and when an episode stops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Measurements(usize),
    /// Total free-evolution time in μs; `max_steps` caps the episode length.
    TotalTime { max: f64, max_steps: usize },
    Photons { max: f64, max_steps: usize },
}

impl Budget {
    /// Maximum number of steps an episode can take.
    pub fn horizon(&self) -> usize {
        match *self {
            Budget::Measurements(m) => m,
            Budget::TotalTime { max_steps, .. } | Budget::Photons { max_steps, .. } => max_steps,
        }
    }

    /// The budget in its own units.
    pub fn amount(&self) -> f64 {
        match *self {
            Budget::Measurements(m) => m.max(1) as f64,
            Budget::TotalTime { max, .. } | Budget::Photons { max, .. } => max,
        }
    }

    /// Whether an episode that completed `steps` steps with the given tally stops.
    pub fn exhausted(&self, steps: usize, tally: f64) -> bool {
        match *self {
            Budget::Measurements(m) => steps >= m,
            Budget::TotalTime { max, max_steps } | Budget::Photons { max, max_steps } => {
                tally >= max || steps >= max_steps
            }
        }
    }
}

/// Fixed, non-trainable control rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    Pgh,
    SigmaInverse,
    SigmaInverseT2,
    InverseTime,
    Random,
    Ramp,
    EqualSplit,
}

impl Heuristic {
    pub const ALL: [Heuristic; 7] = [
        Heuristic::Pgh,
        Heuristic::SigmaInverse,
        Heuristic::SigmaInverseT2,
        Heuristic::InverseTime,
        Heuristic::Random,
        Heuristic::Ramp,
        Heuristic::EqualSplit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::Pgh => "pgh",
            Heuristic::SigmaInverse => "sigma_inverse",
            Heuristic::SigmaInverseT2 => "sigma_inverse_t2",
            Heuristic::InverseTime => "inverse_time",
            Heuristic::Random => "random",
            Heuristic::Ramp => "ramp",
            Heuristic::EqualSplit => "equal_split",
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Heuristic {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, TaskError> {
        Heuristic::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| TaskError::Invalid(format!("unknown strategy '{s}'")))
    }
}

/// Who chooses the controls during a rollout.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Agent(&'a dyn Agent),
    Heuristic(Heuristic),
}

impl Policy<'_> {
    pub fn name(&self) -> String {
        match self {
            Policy::Agent(a) => a.kind().to_string(),
            Policy::Heuristic(h) => h.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOptions {
    /// Fixes the true parameters instead of drawing them from the prior.
    pub truth: Option<Vec<f64>>,
    /// Records the agent inputs of the given kind at every step.
    pub record_inputs: Option<InputMode>,
}

/// Log-probability of one random draw and the first step whose loss it affects.
#[derive(Clone, Copy, Debug)]
pub struct Score<R> {
    pub log_prob: R,
    pub first_step: usize,
}

/// Everything recorded about one simulated experiment.
#[derive(Clone, Debug)]
pub struct EpisodeTrace<R> {
    pub truth: Vec<f64>,
    /// Training loss term after each step.
    pub losses: Vec<R>,
    /// Figure of merit after each step (squared error or error indicator).
    pub errors: Vec<f64>,
    /// Error of the estimate before any measurement.
    pub prior_error: f64,
    /// Resource tally after each step.
    pub resources: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    pub outcomes: Vec<Vec<i64>>,
    pub scores: Vec<Score<R>>,
    /// Agent inputs per step, when requested.
    pub inputs: Vec<Vec<f64>>,
    pub ess_min: f64,
    /// Set when every particle lost all its weight.
    pub aborted: bool,
}

impl<R: Real> EpisodeTrace<R> {
    pub fn new(truth: Vec<f64>) -> Self {
        EpisodeTrace {
            truth,
            losses: Vec::new(),
            errors: Vec::new(),
            prior_error: 0.0,
            resources: Vec::new(),
            controls: Vec::new(),
            outcomes: Vec::new(),
            scores: Vec::new(),
            inputs: Vec::new(),
            ess_min: f64::INFINITY,
            aborted: false,
        }
    }

    fn push_step(&mut self, loss: R, error: f64, resource: f64, controls: Vec<f64>, outcomes: Vec<i64>, ess: f64) {
        self.losses.push(loss);
        self.errors.push(error);
        self.resources.push(resource);
        self.controls.push(controls);
        self.outcomes.push(outcomes);
        self.ess_min = self.ess_min.min(ess);
    }

    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// Loss after step `t`, carrying the last value past an early stop.
    pub fn padded_loss(&self, t: usize) -> Option<R> {
        self.losses.get(t.min(self.losses.len().checked_sub(1)?)).copied()
    }

    /// Error after the last step whose resource tally is at most `r`.
    pub fn error_at_resource(&self, r: f64) -> f64 {
        let mut e = self.prior_error;
        for (res, err) in self.resources.iter().zip(&self.errors) {
            if *res <= r * (1.0 + 1e-12) {
                e = *err;
            } else {
                break;
            }
        }
        e
    }
}

/// A sensing task together with everything needed to simulate it.
#[derive(Clone, Debug)]
pub enum Task {
    Nv(NvTask),
    Dolinar(DolinarTask),
    Qml(QmlTask),
    Multiphase(MultiphaseTask),
    BsClassifier(BsClassifierTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Nv(_) => "nv",
            Task::Dolinar(_) => "dolinar",
            Task::Qml(_) => "qml3",
            Task::Multiphase(_) => "multiphase",
            Task::BsClassifier(_) => "bs_classifier",
        }
    }

    /// Number of steps losses are padded to.
    pub fn horizon(&self) -> usize {
        match self {
            Task::Nv(t) => t.budget.horizon(),
            Task::Dolinar(t) => t.copies,
            Task::Qml(t) => t.horizon(),
            Task::Multiphase(t) => t.measurements,
            Task::BsClassifier(t) => t.layers,
        }
    }

    /// Length of the feature vector built for `InputMode::Features` agents.
    pub fn n_features(&self) -> usize {
        match self {
            Task::Nv(t) => t.n_inputs(),
            Task::Dolinar(_) => tasks::DOLINAR_INPUTS,
            Task::Qml(_) => tasks::QML_INPUTS,
            Task::Multiphase(_) => tasks::MULTIPHASE_INPUTS,
            Task::BsClassifier(_) => 0,
        }
    }

    pub fn n_controls(&self) -> usize {
        match self {
            Task::Nv(t) => t.n_outputs(),
            Task::Dolinar(_) => 1,
            Task::Qml(_) => 2,
            Task::Multiphase(_) => 3,
            Task::BsClassifier(t) => 2 * t.modes() * t.modes() * t.layers,
        }
    }

    /// Checks that the policy can drive this task.
    pub fn check_policy(&self, policy: Policy<'_>) -> Result<(), TaskError> {
        match policy {
            Policy::Heuristic(h) => {
                let ok = match self {
                    Task::Nv(t) => t.supports(h),
                    Task::Dolinar(t) => t.supports(h),
                    Task::Qml(t) => t.supports(h),
                    Task::Multiphase(t) => t.supports(h),
                    Task::BsClassifier(t) => t.supports(h),
                };
                if ok {
                    Ok(())
                } else {
                    Err(TaskError::Unsupported { task: self.name(), policy: h.to_string() })
                }
            }
            Policy::Agent(a) => {
                let needed = self.n_controls();
                let kind_ok = match self {
                    Task::BsClassifier(_) => a.kind() == AgentKind::BsNetwork,
                    Task::Qml(_) => a.kind() != AgentKind::BsNetwork,
                    _ => !matches!(a.kind(), AgentKind::BsNetwork | AgentKind::Tree),
                };
                let outputs_ok = match self {
                    // A single-output NV agent leaves the phase at zero.
                    Task::Nv(_) => a.n_outputs() >= 1 && a.n_outputs() <= needed,
                    _ => a.n_outputs() == needed,
                };
                let inputs_ok = match (a.kind(), a.shape().first()) {
                    (AgentKind::Mlp | AgentKind::Affine, Some(&n_in)) => n_in == self.n_features(),
                    (AgentKind::StaticMlp, Some(&n_in)) => n_in == 2,
                    _ => true,
                };
                if kind_ok && outputs_ok && inputs_ok {
                    Ok(())
                } else {
                    Err(TaskError::AgentShape { task: self.name(), kind: a.kind(), outputs: a.n_outputs(), needed })
                }
            }
        }
    }

    pub fn rollout<R: Real>(&self, policy: Policy<'_>, seed: u64, opts: &RolloutOptions) -> EpisodeTrace<R> {
        match self {
            Task::Nv(t) => t.rollout(policy, seed, opts),
            Task::Dolinar(t) => t.rollout(policy, seed, opts),
            Task::Qml(t) => t.rollout(policy, seed, opts),
            Task::Multiphase(t) => t.rollout(policy, seed, opts),
            Task::BsClassifier(t) => t.rollout(policy, seed, opts),
        }
    }

    /// Truth for an evaluation grid point, when the grid ranges over a
    /// task parameter rather than over the resource.
    pub fn truth_for_grid(&self, g: f64, rng: &mut Rng) -> Option<Vec<f64>> {
        match self {
            Task::Dolinar(t) => Some(t.truth_at(g, rng)),
            _ => None,
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub ess_min: f64,
    pub aborted_episodes: usize,
}

/// Loss and gradient of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub ess_min: f64,
    pub aborted: usize,
    pub clamped_steps: usize,
    pub episodes: usize,
}

impl BatchGradient {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Rolls out one episode per seed on the tape and returns the estimated
/// gradient of the batch loss with respect to the agent parameters.
///
/// Seeds of the loss terms are `∂L/∂ℓ_kt`. The seed of a draw's
/// log-probability is `Σ_{t ≥ first} ∂L/∂ℓ_kt (ℓ_kt − b_kt)` where the
/// baseline `b_kt` is the mean of the other episodes' losses at step `t`.
pub fn estimate_gradient(task: &Task, agent: &dyn Agent, mode: LossMode, seeds: &[u64]) -> BatchGradient {
    let opts = RolloutOptions::default();
    let recorded: Vec<(EpisodeTrace<Var>, Tape)> = seeds
        .par_iter()
        .map(|&s| {
            Tape::reset();
            let tr = task.rollout::<Var>(Policy::Agent(agent), s, &opts);
            (tr, Tape::take())
        })
        .collect();
    let n_params = agent.params().len();
    let horizon = task.horizon();
    let aborted = recorded.iter().filter(|(tr, _)| tr.aborted).count();
    let valid: Vec<&(EpisodeTrace<Var>, Tape)> =
        recorded.iter().filter(|(tr, _)| !tr.aborted && (tr.steps() > 0 || horizon == 0)).collect();
    let ess_min = valid.iter().map(|(tr, _)| tr.ess_min).fold(f64::INFINITY, f64::min);
    if valid.is_empty() || horizon == 0 {
        return BatchGradient {
            loss: 0.0,
            grad: vec![0.0; n_params],
            ess_min,
            aborted,
            clamped_steps: 0,
            episodes: valid.len(),
        };
    }
    let table: Vec<Vec<f64>> = valid
        .iter()
        .map(|(tr, _)| (0..horizon).map(|t| tr.padded_loss(t).map_or(0.0, |v| v.value())).collect())
        .collect();
    let agg = loss::aggregate(mode, &table);
    let b = valid.len();
    let sums: Vec<f64> = (0..horizon).map(|t| table.iter().map(|row| row[t]).sum()).collect();
    let grads: Vec<Vec<f64>> = valid
        .par_iter()
        .enumerate()
        .map(|(k, (tr, tape))| {
            let row = &table[k];
            let advantage: Vec<f64> = (0..horizon)
                .map(|t| {
                    let baseline = if b > 1 { (sums[t] - row[t]) / (b - 1) as f64 } else { 0.0 };
                    agg.step_weights[t] * (row[t] - baseline)
                })
                .collect();
            // Suffix sums: total advantage of the steps from `t` on.
            let mut tail = vec![0.0; horizon + 1];
            for t in (0..horizon).rev() {
                tail[t] = tail[t + 1] + advantage[t];
            }
            let mut seeds: Vec<(Var, f64)> = Vec::with_capacity(horizon + tr.scores.len());
            for t in 0..horizon {
                if agg.step_weights[t] != 0.0 {
                    if let Some(v) = tr.padded_loss(t) {
                        seeds.push((v, agg.step_weights[t]));
                    }
                }
            }
            for s in &tr.scores {
                if s.first_step < horizon {
                    seeds.push((s.log_prob, tail[s.first_step]));
                }
            }
            let mut g = vec![0.0; n_params];
            tape.backward(&seeds, Some(agent), &mut g);
            g
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    for g in &grads {
        for (a, x) in grad.iter_mut().zip(g) {
            *a += x;
        }
    }
    BatchGradient { loss: agg.value, grad, ess_min, aborted, clamped_steps: agg.clamped_steps, episodes: b }
}

/// Batch loss of the agent on the given seeds, without gradients.
pub fn batch_loss(task: &Task, policy: Policy<'_>, mode: LossMode, seeds: &[u64]) -> f64 {
    let opts = RolloutOptions::default();
    let horizon = task.horizon();
    let traces: Vec<EpisodeTrace<f64>> = seeds.par_iter().map(|&s| task.rollout::<f64>(policy, s, &opts)).collect();
    let table: Vec<Vec<f64>> = traces
        .iter()
        .filter(|tr| !tr.aborted && tr.steps() > 0)
        .map(|tr| (0..horizon).map(|t| tr.padded_loss(t).unwrap_or(0.0)).collect())
        .collect();
    loss::aggregate(mode, &table).value
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction; the learning rate is supplied per step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// `α_t = α₀ / √(1 + t/t₀)`.
pub fn learning_rate(alpha0: f64, t0: f64, t: usize) -> f64 {
    alpha0 / (1.0 + t as f64 / t0).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub t0: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_episodes: usize,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
    pub workers: usize,
    /// Rescales any batch gradient longer than this before the Adam step.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 128,
            steps: 2000,
            lr: 1e-3,
            t0: 100.0,
            pretrain_steps: 0,
            pretrain_lr: 1e-2,
            pretrain_episodes: 64,
            eval_episodes: 1000,
            checkpoint_every: 0,
            workers: 1,
            max_grad_norm: None,
        }
    }
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_metrics(&mut self, _row: &MetricsRow) -> Result<(), String> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _step: usize, _agent: &dyn Agent) -> Result<(), String> {
        Ok(())
    }
    fn on_diagnostic(&mut self, _message: &str) {}
}

/// Observer that ignores everything.
pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps_done: usize,
    pub rejected_steps: usize,
    /// Step at which a non-finite loss stopped training.
    pub halted_at: Option<usize>,
    pub final_loss: f64,
    pub pretrain_mse: Option<f64>,
}

/// Builds a worker pool with the given number of threads (0 = all cores).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| TrainError::Pool(e.to_string()))
}

/// Optimizes the agent on the task.
///
/// Batch `s` uses the episode seeds `derive_seed(seed, [TRAIN, s, k])`, so
/// a run is reproducible for a fixed master seed whatever the number of
/// workers.
pub fn train(
    task: &Task,
    agent: &mut dyn Agent,
    mode: LossMode,
    settings: &TrainSettings,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary, TrainError> {
    task.check_policy(Policy::Agent(&*agent))?;
    let pool = worker_pool(settings.workers)?;
    let mut summary =
        TrainSummary { steps_done: 0, rejected_steps: 0, halted_at: None, final_loss: f64::NAN, pretrain_mse: None };
    if settings.pretrain_steps > 0 {
        summary.pretrain_mse = pool.install(|| pretrain(task, agent, settings, seed))?;
        if let Some(mse) = summary.pretrain_mse {
            observer.on_diagnostic(&format!("pretraining finished with mean squared residual {mse:.3e}"));
        }
    }
    let mut adam = Adam::new(agent.params().len());
    for step in 0..settings.steps {
        let seeds: Vec<u64> =
            (0..settings.batch_size).map(|k| derive_seed(seed, &[purpose::TRAIN, step as u64, k as u64])).collect();
        let batch = pool.install(|| estimate_gradient(task, &*agent, mode, &seeds));
        let lr = learning_rate(settings.lr, settings.t0, step);
        let grad_norm = batch.norm();
        if batch.episodes == 0 {
            observer.on_diagnostic(&format!("step {step}: every episode aborted"));
            return Err(TrainError::EmptyBatch(step));
        }
        if batch.aborted > 0 {
            observer.on_diagnostic(&format!("step {step}: {} episodes aborted on degenerate evidence", batch.aborted));
        }
        if batch.clamped_steps > 0 {
            observer.on_diagnostic(&format!("step {step}: batch-mean error clamped at {} steps", batch.clamped_steps));
        }
        let row = MetricsRow {
            step,
            loss: batch.loss,
            grad_norm,
            lr,
            ess_min: batch.ess_min,
            aborted_episodes: batch.aborted,
        };
        observer.on_metrics(&row).map_err(TrainError::Observer)?;
        if !batch.loss.is_finite() {
            warn!("non-finite loss at step {step}; stopping");
            observer.on_diagnostic(&format!("step {step}: non-finite loss, training halted"));
            summary.halted_at = Some(step);
            break;
        }
        if !grad_norm.is_finite() {
            summary.rejected_steps += 1;
            observer.on_diagnostic(&format!("step {step}: non-finite gradient, update rejected"));
        } else {
            let mut grad = batch.grad;
            if let Some(cap) = settings.max_grad_norm.filter(|&cap| grad_norm > cap) {
                grad.iter_mut().for_each(|g| *g *= cap / grad_norm);
            }
            adam.step(agent.params_mut(), &grad, lr);
        }
        debug!("step {step} loss {:.6e} |g| {grad_norm:.3e}", batch.loss);
        summary.steps_done = step + 1;
        summary.final_loss = batch.loss;
        if settings.checkpoint_every > 0 && (step + 1) % settings.checkpoint_every == 0 {
            observer.on_checkpoint(step + 1, &*agent).map_err(TrainError::Observer)?;
        }
    }
    Ok(summary)
}

/// Least-squares fit of the agent to the linear `τ` ramp.
///
/// Episodes are simulated with the ramp rule while the agent's inputs are
/// recorded; the target output at each step is the one that makes the
/// agent reproduce the ramp's control. Returns `None` for tasks without a
/// ramp.
pub fn pretrain(task: &Task, agent: &mut dyn Agent, settings: &TrainSettings, seed: u64) -> Result<Option<f64>, TrainError> {
    let Task::Nv(nv) = task else {
        return Ok(None);
    };
    let opts = RolloutOptions { truth: None, record_inputs: Some(agent.input_mode()) };
    let traces: Vec<EpisodeTrace<f64>> = (0..settings.pretrain_episodes.max(1))
        .into_par_iter()
        .map(|k| task.rollout::<f64>(Policy::Heuristic(Heuristic::Ramp), derive_seed(seed, &[purpose::PRETRAIN, k as u64]), &opts))
        .collect();
    let n_out = agent.n_outputs();
    let mut samples: Vec<(Query, Vec<f64>)> = Vec::new();
    for tr in &traces {
        for (t, (inputs, c)) in tr.inputs.iter().zip(&tr.controls).enumerate() {
            let mut q = Query::new(t);
            q.inputs = inputs.clone();
            let mut y = vec![(c[0] - 1.0) / nv.h];
            if n_out > 1 {
                y.push(c[1] / std::f64::consts::PI);
            }
            samples.push((q, y));
        }
    }
    if samples.is_empty() {
        return Ok(Some(0.0));
    }
    let n_params = agent.params().len();
    let mut adam = Adam::new(n_params);
    let mut mse = f64::NAN;
    for _ in 0..settings.pretrain_steps {
        let a: &dyn Agent = &*agent;
        let parts: Vec<(Vec<f64>, f64)> = samples
            .par_chunks(64)
            .map(|chunk| {
                let mut g = vec![0.0; n_params];
                let mut out = vec![0.0; n_out];
                let mut sq = 0.0;
                for (q, y) in chunk {
                    a.forward(q, &mut out);
                    let adj: Vec<f64> = (0..n_out).map(|j| 2.0 * (out[j] - y[j]) / samples.len() as f64).collect();
                    sq += (0..n_out).map(|j| (out[j] - y[j]).powi(2)).sum::<f64>();
                    let mut in_adj = vec![0.0; q.inputs.len()];
                    a.backward(q, &adj, &mut in_adj, &mut g);
                }
                (g, sq)
            })
            .collect();
        let mut grad = vec![0.0; n_params];
        let mut sq = 0.0;
        for (g, s) in &parts {
            for (x, y) in grad.iter_mut().zip(g) {
                *x += y;
            }
            sq += s;
        }
        mse = sq / samples.len() as f64;
        adam.step(agent.params_mut(), &grad, settings.pretrain_lr);
    }
    Ok(Some(mse))
}

/// One row of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub resource: f64,
    pub precision_mean: f64,
    pub precision_stderr: f64,
    pub strategy: String,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Mean and standard error of the figure of merit of a frozen policy.
///
/// Episode `k` uses the seed `derive_seed(seed, [EVAL, k])` whatever the
/// policy, so strategies are compared on common random numbers. Without a
/// grid one row is produced per step, at the mean resource tally of that
/// step. With a grid, each point is either a resource level (the error
/// after the last step within it) or, for the Dolinar task, the true
/// amplitude.
pub fn evaluate(
    task: &Task,
    policy: Policy<'_>,
    strategy: &str,
    episodes: usize,
    seed: u64,
    grid: Option<&[f64]>,
) -> Result<Vec<EvalRow>, TaskError> {
    task.check_policy(policy)?;
    let seeds: Vec<u64> = (0..episodes).map(|k| derive_seed(seed, &[purpose::EVAL, k as u64])).collect();
    let run = |truths: Option<f64>| -> Vec<EpisodeTrace<f64>> {
        seeds
            .par_iter()
            .map(|&s| {
                let mut rng = crate::rng::stream(s, &[99]);
                let truth = truths.and_then(|g| task.truth_for_grid(g, &mut rng));
                let opts = RolloutOptions { truth, record_inputs: None };
                task.rollout::<f64>(policy, s, &opts)
            })
            .filter(|tr| !tr.aborted)
            .collect()
    };
    let row = |resource: f64, errs: &[f64]| {
        let (m, se) = mean_stderr(errs);
        EvalRow { resource, precision_mean: m, precision_stderr: se, strategy: strategy.to_string() }
    };
    let mut rows = Vec::new();
    match grid {
        Some(points) if task.truth_for_grid(0.0, &mut crate::rng::stream(0, &[])).is_some() => {
            for &g in points {
                let traces = run(Some(g));
                let errs: Vec<f64> = traces.iter().map(|tr| *tr.errors.last().unwrap_or(&tr.prior_error)).collect();
                rows.push(row(g, &errs));
            }
        }
        Some(points) => {
            let traces = run(None);
            for &g in points {
                let errs: Vec<f64> = traces.iter().map(|tr| tr.error_at_resource(g)).collect();
                rows.push(row(g, &errs));
            }
        }
        None => {
            let traces = run(None);
            for t in 0..task.horizon() {
                let (mut errs, mut res) = (Vec::new(), Vec::new());
                for tr in &traces {
                    let Some(last) = tr.steps().checked_sub(1) else { continue };
                    let i = t.min(last);
                    errs.push(tr.errors[i]);
                    res.push(tr.resources[i]);
                }
                if errs.is_empty() {
                    continue;
                }
                rows.push(row(mean_stderr(&res).0, &errs));
            }
        }
    }
    Ok(rows)
}

/// Writes rows as CSV with the header `resource,precision_mean,precision_stderr,strategy`.
pub fn write_eval_csv<W: std::io::Write>(rows: &[EvalRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["resource", "precision_mean", "precision_stderr", "strategy"])?;
    }
    w.flush()?;
    Ok(())
}
