//! Control policies and the feature maps feeding them.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::particle_filter::{ParameterSpace, ParticleEnsemble, PosteriorMoments};
use crate::rng::Rng;
use crate::sensor_models_nv::NvControls;
use crate::sensor_models_photonic::{BsControl, BsNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("unknown agent kind '{0}'")]
    UnknownKind(String),
    #[error("invalid shape {shape:?} for agent kind {kind}")]
    Shape { kind: AgentKind, shape: Vec<usize> },
    #[error("path {0:?} does not address a node of the tree")]
    BadPath(Vec<u8>),
}

/// What an agent is evaluated on at one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Query {
    pub inputs: Vec<f64>,
    pub step: usize,
    /// Coarse-grained outcome history, used by decision trees.
    pub path: Vec<u8>,
}

impl Query {
    pub fn new(step: usize) -> Self {
        Query { inputs: Vec::new(), step, path: Vec::new() }
    }

    pub fn with_path(step: usize, path: Vec<u8>) -> Self {
        Query { inputs: Vec::new(), step, path }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Mlp,
    StaticMlp,
    Table,
    Tree,
    Affine,
    BsNetwork,
}

impl AgentKind {
    pub const ALL: [AgentKind; 6] =
        [AgentKind::Mlp, AgentKind::StaticMlp, AgentKind::Table, AgentKind::Tree, AgentKind::Affine, AgentKind::BsNetwork];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Mlp => "mlp",
            AgentKind::StaticMlp => "static_mlp",
            AgentKind::Table => "table",
            AgentKind::Tree => "tree",
            AgentKind::Affine => "affine",
            AgentKind::BsNetwork => "bs_network",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = AgentError;
    fn from_str(s: &str) -> Result<Self, AgentError> {
        AgentKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| AgentError::UnknownKind(s.to_string()))
    }
}

/// Which inputs a task must prepare for the agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    /// The task's full feature vector.
    Features,
    /// Only the normalized resource and step index `(R̃, t̃)`.
    ResourceStep,
    /// No inputs; the step index (or path) selects the output.
    None,
}

/// A trainable policy with its own vector-Jacobian product.
///
/// Agents are immutable during rollouts; `backward` accumulates into `grad`.
pub trait Agent: Send + Sync {
    fn kind(&self) -> AgentKind;
    /// Shape descriptor stored in checkpoints.
    fn shape(&self) -> Vec<usize>;
    fn input_mode(&self) -> InputMode;
    fn n_outputs(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, q: &Query, out: &mut [f64]);
    fn backward(&self, q: &Query, out_adj: &[f64], in_adj: &mut [f64], grad: &mut [f64]);
}

/// Builds an agent of the given kind and shape with zero parameters.
pub fn build_agent(kind: AgentKind, shape: &[usize]) -> Result<Box<dyn Agent>, AgentError> {
    let bad = || AgentError::Shape { kind, shape: shape.to_vec() };
    Ok(match kind {
        AgentKind::Mlp | AgentKind::StaticMlp => {
            if shape.len() < 2 || shape.contains(&0) {
                return Err(bad());
            }
            Box::new(Mlp::zeros(shape, kind == AgentKind::StaticMlp))
        }
        AgentKind::Table => match shape {
            [steps, outs] if *outs > 0 => Box::new(ControlTable::zeros(*steps, *outs)),
            _ => return Err(bad()),
        },
        AgentKind::Tree => match shape {
            [depth, outs] if *outs > 0 && *depth < 20 => Box::new(TreeAgent::zeros(*depth, *outs)),
            _ => return Err(bad()),
        },
        AgentKind::Affine => match shape {
            [n_in, feature] if feature < n_in => Box::new(AffineAgent::new(*n_in, *feature, [0.0, 0.0])),
            _ => return Err(bad()),
        },
        AgentKind::BsNetwork => match shape {
            [modes, layers] if *modes > 0 && *layers > 0 => Box::new(BsNetworkAgent::zeros(*modes, *layers)),
            _ => return Err(bad()),
        },
    })
}

/// Feed-forward network with `tanh` hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    static_inputs: bool,
}

pub const DEFAULT_HIDDEN: [usize; 5] = [64; 5];

impl Mlp {
    pub fn zeros(widths: &[usize], static_inputs: bool) -> Self {
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp { widths: widths.to_vec(), params: vec![0.0; n], static_inputs }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn new(n_in: usize, hidden: &[usize], n_out: usize, static_inputs: bool, rng: &mut Rng) -> Self {
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        let mut m = Mlp::zeros(&widths, static_inputs);
        let mut off = 0;
        for w in widths.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for p in &mut m.params[off..off + w[0] * w[1]] {
                *p = rng.random_range(-limit..limit);
            }
            off += w[0] * w[1] + w[1];
        }
        m
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Activations of every layer (input included).
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.widths.len() - 2;
        for (l, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let wts = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let prev = acts.last().unwrap();
            let mut next = bias.to_vec();
            for (o, v) in next.iter_mut().enumerate() {
                let row = &wts[o * n_in..(o + 1) * n_in];
                *v += row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
            }
            if l < last {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            acts.push(next);
            off += n_in * n_out + n_out;
        }
        acts
    }
}

impl Agent for Mlp {
    fn kind(&self) -> AgentKind {
        if self.static_inputs {
            AgentKind::StaticMlp
        } else {
            AgentKind::Mlp
        }
    }
    fn shape(&self) -> Vec<usize> {
        self.widths.clone()
    }
    fn input_mode(&self) -> InputMode {
        if self.static_inputs {
            InputMode::ResourceStep
        } else {
            InputMode::Features
        }
    }
    fn n_outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn forward(&self, q: &Query, out: &mut [f64]) {
        let acts = self.activations(&q.inputs);
        out.copy_from_slice(acts.last().unwrap());
    }
    fn backward(&self, q: &Query, out_adj: &[f64], in_adj: &mut [f64], grad: &mut [f64]) {
        let acts = self.activations(&q.inputs);
        let n_layers = self.widths.len() - 1;
        let mut offs = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.widths.windows(2) {
            offs.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = out_adj.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            if l < n_layers - 1 {
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let o = offs[l];
            let prev = &acts[l];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let g = &mut grad[o + j * n_in..o + (j + 1) * n_in];
                for (gi, p) in g.iter_mut().zip(prev) {
                    *gi += dj * p;
                }
                grad[o + n_in * n_out + j] += dj;
            }
            let wts = &self.params[o..o + n_in * n_out];
            let mut back = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (b, w) in back.iter_mut().zip(&wts[j * n_in..(j + 1) * n_in]) {
                    *b += dj * w;
                }
            }
            delta = back;
        }
        for (a, d) in in_adj.iter_mut().zip(&delta) {
            *a += d;
        }
    }
}

/// One stored output tuple per step: a non-adaptive policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTable {
    steps: usize,
    outs: usize,
    params: Vec<f64>,
}

impl ControlTable {
    pub fn zeros(steps: usize, outs: usize) -> Self {
        ControlTable { steps, outs, params: vec![0.0; steps * outs] }
    }

    pub fn from_values(steps: usize, outs: usize, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), steps * outs);
        ControlTable { steps, outs, params }
    }

    fn row(&self, step: usize) -> usize {
        step.min(self.steps.saturating_sub(1)) * self.outs
    }
}

impl Agent for ControlTable {
    fn kind(&self) -> AgentKind {
        AgentKind::Table
    }
    fn shape(&self) -> Vec<usize> {
        vec![self.steps, self.outs]
    }
    fn input_mode(&self) -> InputMode {
        InputMode::None
    }
    fn n_outputs(&self) -> usize {
        self.outs
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn forward(&self, q: &Query, out: &mut [f64]) {
        let r = self.row(q.step);
        out.copy_from_slice(&self.params[r..r + self.outs]);
    }
    fn backward(&self, q: &Query, out_adj: &[f64], _: &mut [f64], grad: &mut [f64]) {
        let r = self.row(q.step);
        for (g, a) in grad[r..r + self.outs].iter_mut().zip(out_adj) {
            *g += a;
        }
    }
}

/// Complete ternary tree addressed by the coarse outcome history.
///
/// Nodes are stored level by level; the node reached by path `p` of length
/// `t` sits at `(3^t − 1)/2 + Σ p_i 3^{t−1−i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeAgent {
    depth: usize,
    outs: usize,
    params: Vec<f64>,
}

impl TreeAgent {
    pub fn node_count(depth: usize) -> usize {
        (3usize.pow(depth as u32 + 1) - 1) / 2
    }

    pub fn zeros(depth: usize, outs: usize) -> Self {
        TreeAgent { depth, outs, params: vec![0.0; Self::node_count(depth) * outs] }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_index(&self, path: &[u8]) -> Result<usize, AgentError> {
        if path.len() > self.depth || path.iter().any(|&c| c > 2) {
            return Err(AgentError::BadPath(path.to_vec()));
        }
        let level_start = (3usize.pow(path.len() as u32) - 1) / 2;
        Ok(level_start + path.iter().fold(0usize, |acc, &c| acc * 3 + c as usize))
    }

    fn offset(&self, q: &Query) -> usize {
        self.node_index(&q.path).expect("path exceeds the tree depth") * self.outs
    }
}

impl Agent for TreeAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Tree
    }
    fn shape(&self) -> Vec<usize> {
        vec![self.depth, self.outs]
    }
    fn input_mode(&self) -> InputMode {
        InputMode::None
    }
    fn n_outputs(&self) -> usize {
        self.outs
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn forward(&self, q: &Query, out: &mut [f64]) {
        let o = self.offset(q);
        out.copy_from_slice(&self.params[o..o + self.outs]);
    }
    fn backward(&self, q: &Query, out_adj: &[f64], _: &mut [f64], grad: &mut [f64]) {
        let o = self.offset(q);
        for (g, a) in grad[o..o + self.outs].iter_mut().zip(out_adj) {
            *g += a;
        }
    }
}

/// `f = a + b·x_k` on a single selected feature.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineAgent {
    n_in: usize,
    feature: usize,
    params: [f64; 2],
}

impl AffineAgent {
    pub fn new(n_in: usize, feature: usize, params: [f64; 2]) -> Self {
        AffineAgent { n_in, feature, params }
    }
}

impl Agent for AffineAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Affine
    }
    fn shape(&self) -> Vec<usize> {
        vec![self.n_in, self.feature]
    }
    fn input_mode(&self) -> InputMode {
        InputMode::Features
    }
    fn n_outputs(&self) -> usize {
        1
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn forward(&self, q: &Query, out: &mut [f64]) {
        out[0] = self.params[0] + self.params[1] * q.inputs[self.feature];
    }
    fn backward(&self, q: &Query, out_adj: &[f64], in_adj: &mut [f64], grad: &mut [f64]) {
        grad[0] += out_adj[0];
        grad[1] += out_adj[0] * q.inputs[self.feature];
        in_adj[self.feature] += out_adj[0] * self.params[1];
    }
}

/// Stack of trainable passive networks, one per layer.
///
/// Parameters are the real and imaginary parts of each generator `A`
/// (row-major, real block first). The outputs are the entries of every
/// layer's unitary, laid out as `[Re U, Im U]` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BsNetworkAgent {
    modes: usize,
    layers: usize,
    params: Vec<f64>,
}

impl BsNetworkAgent {
    pub fn zeros(modes: usize, layers: usize) -> Self {
        BsNetworkAgent { modes, layers, params: vec![0.0; 2 * modes * modes * layers] }
    }

    /// Generators with i.i.d. standard normal entries.
    pub fn random(modes: usize, layers: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut a = Self::zeros(modes, layers);
        for p in &mut a.params {
            let z: f64 = StandardNormal.sample(rng);
            *p = scale * z;
        }
        a
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn network(&self, layer: usize) -> BsNetwork {
        let n = self.modes;
        let block = &self.params[2 * n * n * layer..2 * n * n * (layer + 1)];
        BsNetwork::new(DMatrix::from_fn(n, n, |r, c| Complex64::new(block[r * n + c], block[n * n + r * n + c])))
    }
}

impl Agent for BsNetworkAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::BsNetwork
    }
    fn shape(&self) -> Vec<usize> {
        vec![self.modes, self.layers]
    }
    fn input_mode(&self) -> InputMode {
        InputMode::None
    }
    fn n_outputs(&self) -> usize {
        2 * self.modes * self.modes * self.layers
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn forward(&self, _: &Query, out: &mut [f64]) {
        let n = self.modes;
        for l in 0..self.layers {
            let u = self.network(l).unitary();
            let o = &mut out[2 * n * n * l..2 * n * n * (l + 1)];
            for r in 0..n {
                for c in 0..n {
                    o[r * n + c] = u[(r, c)].re;
                    o[n * n + r * n + c] = u[(r, c)].im;
                }
            }
        }
    }
    fn backward(&self, _: &Query, out_adj: &[f64], _: &mut [f64], grad: &mut [f64]) {
        let n = self.modes;
        for l in 0..self.layers {
            let a = &out_adj[2 * n * n * l..2 * n * n * (l + 1)];
            if a.iter().all(|&x| x == 0.0) {
                continue;
            }
            let gbar = DMatrix::from_fn(n, n, |r, c| Complex64::new(a[r * n + c], a[n * n + r * n + c]));
            let ga = self.network(l).unitary_vjp(&gbar);
            let g = &mut grad[2 * n * n * l..2 * n * n * (l + 1)];
            for r in 0..n {
                for c in 0..n {
                    g[r * n + c] += ga[(r, c)].re;
                    g[n * n + r * n + c] += ga[(r, c)].im;
                }
            }
        }
    }
}

/// Default cap on the rescaled standard deviation.
pub const SIGMA_CAP: f64 = 1.4;

/// `σ̃ = −(2/10)·ln √v − 1`, capped; a vanishing variance maps to the cap.
pub fn rescaled_sigma<R: Real>(variance: R, cap: f64) -> R {
    if variance.val() <= 0.0 || !variance.val().is_finite() {
        return R::cst(cap);
    }
    (variance.ln() * -0.1 - 1.0).min_r(R::cst(cap))
}

/// Normalized feature vector `(θ̃, σ̃, χ, t̃, R̃)` of length `d² + 2d + 2`.
///
/// `bounds` holds the prior box of each continuous dimension.
pub fn featurize_nv<R: Real>(
    m: &PosteriorMoments<R>,
    bounds: &[(f64, f64)],
    t: usize,
    m_max: usize,
    resource: R,
    r_max: f64,
    sigma_cap: f64,
) -> Vec<R> {
    let d = m.dim();
    let mut f = Vec::with_capacity(d * d + 2 * d + 2);
    for (i, &(lo, hi)) in bounds.iter().enumerate().take(d) {
        f.push((m.mean[i] - lo) * (2.0 / (hi - lo)) - 1.0);
    }
    for i in 0..d {
        f.push(rescaled_sigma(m.cov(i, i), sigma_cap));
    }
    f.extend(m.correlation.iter().copied());
    f.push(R::cst(2.0 * t as f64 / m_max.max(1) as f64 - 1.0));
    f.push(resource * (2.0 / r_max) - 1.0);
    f
}

/// `(τ, φ) = (h, π)·|f| + (1 μs, 0)`. Agents with a single output leave `φ = 0`.
pub fn nv_control<R: Real>(out: &[R], h: f64, with_phase: bool) -> (R, R) {
    let tau = out[0].abs() * h + 1.0;
    let phi = if with_phase && out.len() > 1 { out[1].abs() * PI } else { R::zero() };
    (tau, phi)
}

/// Budget regime the prefactor and inverse-time coefficient depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Measurement,
    Time,
}

/// What is known about the coherence time when choosing the prefactor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coherence {
    Infinite,
    Known(f64),
    /// `1/T2` unknown in `(a, b)`.
    Interval(f64, f64),
}

/// Prefactor `h` (μs) of the DC model.
pub fn dc_prefactor(regime: Regime, budget: f64, coherence: Coherence) -> f64 {
    let base = match regime {
        Regime::Measurement => (budget.sqrt()).exp2().ceil(),
        Regime::Time => budget / 20.0,
    };
    match coherence {
        Coherence::Infinite => base,
        Coherence::Known(t2) => base.max(t2),
        Coherence::Interval(a, _) => base.max(1.0 / a),
    }
}

/// Prefactor of the hyperfine model: `min(40, T2/2)`.
pub fn hyperfine_prefactor(t2: f64) -> f64 {
    40f64.min(t2 / 2.0)
}

pub const PGH_EPSILON: f64 = 1e-5;

/// Particle guess heuristic: `τ = 1/(‖θ₁ − θ₂‖ + ε)` over the `dims` coordinates.
pub fn pgh_control(ens: &ParticleEnsemble<f64>, dims: &[usize], rng: &mut Rng) -> NvControls {
    let a = ens.draw_index(rng);
    let b = ens.draw_index(rng);
    let (pa, pb) = (ens.particle(a), ens.particle(b));
    let dist = dims.iter().map(|&i| (pa[i] - pb[i]).powi(2)).sum::<f64>().sqrt();
    NvControls::new(1.0 / (dist + PGH_EPSILON), 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaVariant {
    /// `τ = tr(Σ)^{−1/2}`.
    Plain,
    /// `τ = [tr(Σ)^{1/2} + T̂2⁻¹]⁻¹`.
    WithCoherence,
}

/// `trace` is the trace of the posterior covariance over the target dimensions.
pub fn sigma_inverse_control(trace: f64, inv_t2: f64, variant: SigmaVariant) -> NvControls {
    let s = trace.max(0.0).sqrt();
    let tau = match variant {
        SigmaVariant::Plain => 1.0 / s,
        SigmaVariant::WithCoherence => 1.0 / (s + inv_t2),
    };
    NvControls::new(tau, 0.0)
}

/// Inverse-time rule `τ = α^{1/β̂}/T̂⁻¹`; the literal reading multiplies instead.
pub fn inverse_time_control(inv_t: f64, beta: f64, alpha: f64, literal: bool) -> NvControls {
    let a = alpha.powf(1.0 / beta);
    NvControls::new(if literal { a * inv_t } else { a / inv_t }, 0.0)
}

/// `τ⁻¹` uniform on `(lo, hi)`.
pub fn random_control(inv_tau_range: (f64, f64), rng: &mut Rng) -> NvControls {
    let (lo, hi) = inv_tau_range;
    NvControls::new(1.0 / rng.random_range(lo..hi), 0.0)
}

/// Linear ramp from 1 μs to `h` over the episode, `progress ∈ [0, 1]`.
pub fn ramp_control(h: f64, progress: f64) -> NvControls {
    NvControls::new(1.0 + (h - 1.0) * progress.clamp(0.0, 1.0), 0.0)
}

/// Agent output reproducing [`ramp_control`] through [`nv_control`].
pub fn ramp_target(h: f64, progress: f64) -> f64 {
    (h - 1.0) / h * progress.clamp(0.0, 1.0)
}

/// Beam-splitter angles that send an equal share of the signal to each of
/// `steps + 1` counters (the last step counts both ports).
pub fn equal_split_control(step: usize, steps: usize) -> BsControl {
    let remaining = (steps + 1 - step.min(steps - 1)) as f64;
    BsControl { theta: (1.0 / remaining).sqrt().asin(), phi: 0.0 }
}

/// The continuous bounds of `space`, in feature order.
pub fn continuous_bounds(space: &ParameterSpace) -> Vec<(f64, f64)> {
    space.continuous_indices().into_iter().map(|i| space.bounds(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use crate::particle_filter::Dim;
    use crate::rng::stream;
    use std::sync::Arc;

    fn fd_check(agent: &mut dyn Agent, q: &Query) {
        let n_out = agent.n_outputs();
        let seed: Vec<f64> = (0..n_out).map(|i| 0.3 + 0.7 * i as f64).collect();
        let f = |a: &dyn Agent, q: &Query| {
            let mut o = vec![0.0; n_out];
            a.forward(q, &mut o);
            o.iter().zip(&seed).map(|(x, s)| x * s).sum::<f64>()
        };
        let mut grad = vec![0.0; agent.params().len()];
        let mut in_adj = vec![0.0; q.inputs.len()];
        agent.backward(q, &seed, &mut in_adj, &mut grad);
        let h = 1e-6;
        for k in (0..grad.len()).step_by((grad.len() / 13).max(1)) {
            let p0 = agent.params()[k];
            agent.params_mut()[k] = p0 + h;
            let fp = f(agent, q);
            agent.params_mut()[k] = p0 - h;
            let fm = f(agent, q);
            agent.params_mut()[k] = p0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * fd.abs().max(1.0), "param {k}: {fd} vs {}", grad[k]);
        }
        for k in 0..q.inputs.len() {
            let mut qp = q.clone();
            qp.inputs[k] += h;
            let mut qm = q.clone();
            qm.inputs[k] -= h;
            let fd = (f(agent, &qp) - f(agent, &qm)) / (2.0 * h);
            assert!((fd - in_adj[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn mlp_vjp_matches_finite_differences() {
        let mut m = Mlp::new(5, &[8, 8, 8], 2, false, &mut stream(1, &[]));
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            *p += 0.01 * (i % 7) as f64;
        }
        let q = Query { inputs: vec![0.3, -0.2, 1.1, 0.0, -0.9], step: 0, path: vec![] };
        fd_check(&mut m, &q);
    }

    #[test]
    fn mlp_default_shape_and_determinism() {
        let m = Mlp::new(5, &DEFAULT_HIDDEN, 2, false, &mut stream(4, &[]));
        assert_eq!(m.shape(), vec![5, 64, 64, 64, 64, 64, 2]);
        assert_eq!(m.params().len(), 5 * 64 + 64 + 4 * (64 * 64 + 64) + 64 * 2 + 2);
        let q = Query { inputs: vec![0.1; 5], ..Default::default() };
        let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
        m.forward(&q, &mut a);
        m.forward(&q, &mut b);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn bs_network_agent_vjp() {
        let mut a = BsNetworkAgent::random(3, 2, 0.4, &mut stream(2, &[]));
        fd_check(&mut a, &Query::new(0));
    }

    #[test]
    fn affine_and_table_vjp() {
        let mut a = AffineAgent::new(3, 1, [0.2, -0.7]);
        fd_check(&mut a, &Query { inputs: vec![0.5, 0.25, -1.0], ..Default::default() });
        let mut t = ControlTable::from_values(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mut out = [0.0; 2];
        t.forward(&Query::new(1), &mut out);
        assert_eq!(out, [0.3, 0.4]);
        fd_check(&mut t, &Query::new(2));
    }

    #[test]
    fn tree_addressing() {
        assert_eq!(TreeAgent::node_count(13), 2_391_484);
        let mut t = TreeAgent::zeros(2, 2);
        assert_eq!(t.node_index(&[]).unwrap(), 0);
        assert_eq!(t.node_index(&[1, 2]).unwrap(), 4 + 5);
        assert!(t.node_index(&[0, 0, 0]).is_err());
        assert!(t.node_index(&[3]).is_err());
        let idx = t.node_index(&[1, 2]).unwrap();
        t.params_mut()[2 * idx] = 0.9;
        let mut out = [0.0; 2];
        t.forward(&Query::with_path(2, vec![1, 2]), &mut out);
        assert_eq!(out, [0.9, 0.0]);
        t.forward(&Query::with_path(0, vec![]), &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(TreeAgent::node_count(2) * 2, t.params().len());
    }

    #[test]
    fn build_round_trip() {
        for (k, s) in [
            (AgentKind::Mlp, vec![3, 4, 2]),
            (AgentKind::StaticMlp, vec![2, 4, 1]),
            (AgentKind::Table, vec![5, 2]),
            (AgentKind::Tree, vec![3, 2]),
            (AgentKind::Affine, vec![5, 1]),
            (AgentKind::BsNetwork, vec![4, 2]),
        ] {
            let a = build_agent(k, &s).unwrap();
            assert_eq!(a.kind(), k);
            assert_eq!(a.shape(), s);
            assert_eq!(k.name().parse::<AgentKind>().unwrap(), k);
        }
        assert!(build_agent(AgentKind::Affine, &[2, 5]).is_err());
        assert!("nope".parse::<AgentKind>().is_err());
    }

    #[test]
    fn featurizer_examples() {
        assert_eq!(rescaled_sigma(1.0, SIGMA_CAP), -1.0);
        assert!((rescaled_sigma(1e-10, SIGMA_CAP) - 1.302585).abs() < 1e-6);
        assert_eq!(rescaled_sigma(0.0, SIGMA_CAP), SIGMA_CAP);
        assert_eq!(rescaled_sigma(1e-40, SIGMA_CAP), SIGMA_CAP);
        let m = PosteriorMoments { mean: vec![1.0], covariance: vec![0.04], correlation: vec![1.0] };
        let f = featurize_nv(&m, &[(0.0, 1.0)], 20, 20, 5.0, 10.0, SIGMA_CAP);
        assert_eq!(f.len(), 5);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[3], 1.0);
        assert_eq!(f[4], 0.0);
        let m0 = PosteriorMoments { mean: vec![0.0], covariance: vec![0.04], correlation: vec![1.0] };
        let f = featurize_nv(&m0, &[(0.0, 1.0)], 0, 20, 0.0, 10.0, SIGMA_CAP);
        assert_eq!((f[0], f[3], f[4]), (-1.0, -1.0, -1.0));
    }

    #[test]
    fn featurizer_is_differentiable() {
        Tape::reset();
        let v = Var::leaf(0.01);
        let m = PosteriorMoments { mean: vec![Var::constant(0.5)], covariance: vec![v], correlation: vec![Var::one()] };
        let f = featurize_nv(&m, &[(0.0, 1.0)], 1, 4, Var::constant(1.0), 4.0, SIGMA_CAP);
        let tape = Tape::take();
        let adj = tape.backward(&[(f[1], 1.0)], None, &mut []);
        assert!((adj[v.index().unwrap()] + 0.1 / 0.01).abs() < 1e-9);
    }

    #[test]
    fn control_examples() {
        let (t, p) = nv_control(&[0.0, 0.0], 16.0, true);
        assert_eq!((t, p), (1.0, 0.0));
        let (t, p) = nv_control(&[-0.5, 0.5], 16.0, true);
        assert_eq!((t, p), (9.0, PI / 2.0));
        let (_, p) = nv_control(&[-0.5, 0.5], 16.0, false);
        assert_eq!(p, 0.0);
        assert_eq!(dc_prefactor(Regime::Measurement, 16.0, Coherence::Infinite), 16.0);
        assert_eq!(dc_prefactor(Regime::Time, 2560.0, Coherence::Infinite), 128.0);
        assert_eq!(dc_prefactor(Regime::Measurement, 16.0, Coherence::Known(100.0)), 100.0);
        assert_eq!(dc_prefactor(Regime::Time, 2560.0, Coherence::Interval(0.005, 0.01)), 200.0);
        assert_eq!(hyperfine_prefactor(100.0), 40.0);
        assert_eq!(hyperfine_prefactor(20.0), 10.0);
    }

    #[test]
    fn heuristic_examples() {
        let space = Arc::new(ParameterSpace::new(vec![Dim::continuous("omega", 0.0, 1.0)], None).unwrap());
        let ens = ParticleEnsemble::from_particles(space.clone(), vec![0.3, 0.7], vec![0.5, 0.5]);
        let mut rng = stream(9, &[]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let c = pgh_control(&ens, &[0], &mut rng);
            seen.insert((c.tau * 1e3).round() as i64);
            assert!((c.tau - 1.0 / (0.4 + 1e-5)).abs() < 1e-9 || (c.tau - 1e5).abs() < 1e-6);
        }
        assert_eq!(seen.len(), 2);
        let degenerate = ParticleEnsemble::from_particles(space, vec![0.3, 0.7], vec![1.0, 0.0]);
        for _ in 0..50 {
            assert!((pgh_control(&degenerate, &[0], &mut rng).tau - 1e5).abs() < 1e-6);
        }
        assert!((sigma_inverse_control(0.04, 0.0, SigmaVariant::Plain).tau - 5.0).abs() < 1e-12);
        assert!((sigma_inverse_control(0.04, 0.1, SigmaVariant::WithCoherence).tau - 1.0 / 0.3).abs() < 1e-12);
        assert_eq!(
            sigma_inverse_control(0.04, 0.0, SigmaVariant::WithCoherence),
            sigma_inverse_control(0.04, 0.0, SigmaVariant::Plain)
        );
        assert!((inverse_time_control(0.05, 1.0, 0.79681, false).tau - 15.9362).abs() < 1e-9);
        assert!((inverse_time_control(0.05, 1.0, 0.79681, true).tau - 0.0398405).abs() < 1e-9);
        assert_eq!(ramp_control(23.0, 0.0).tau, 1.0);
        assert_eq!(ramp_control(23.0, 1.0).tau, 23.0);
        let (t, _) = nv_control(&[ramp_target(23.0, 0.5)], 23.0, false);
        assert!((t - ramp_control(23.0, 0.5).tau).abs() < 1e-12);
    }

    #[test]
    fn random_control_is_uniform_in_inverse_time() {
        let mut rng = stream(5, &[]);
        let mut xs: Vec<f64> = (0..100_000).map(|_| 1.0 / random_control((0.01, 0.1), &mut rng).tau).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x - 0.01) / 0.09;
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov critical value at the 1% level.
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn equal_split_sends_equal_shares() {
        let steps = 5;
        let mut remaining = 1.0;
        let mut shares = Vec::new();
        for t in 0..steps {
            let s = equal_split_control(t, steps).theta.sin().powi(2);
            if t == steps - 1 {
                shares.push(remaining * s);
                shares.push(remaining * (1.0 - s));
            } else {
                shares.push(remaining * s);
                remaining *= 1.0 - s;
            }
        }
        for s in shares {
            assert!((s - 1.0 / 6.0).abs() < 1e-12);
        }
    }
}
