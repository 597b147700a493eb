//! Episode simulators: one measurement loop per sensing task.
//!
//! Every rollout is generic over [`Real`]. With `f64` it is a plain
//! simulation; with [`crate::autodiff::Var`] it records everything the
//! gradient estimator needs on the current thread's tape.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng as _;

use super::loss::{classification_loss, dolinar_loss, EtaForm, Sign};
use super::{Budget, EpisodeTrace, FilterSettings, Heuristic, Policy, RolloutOptions, Score, TaskError};
use crate::agents::{
    continuous_bounds, equal_split_control, featurize_nv, inverse_time_control, nv_control, pgh_control,
    random_control, ramp_control, rescaled_sigma, sigma_inverse_control, Agent, AgentKind, InputMode, Query,
    SigmaVariant,
};
use crate::autodiff::Real;
use crate::bounds::helstrom;
use crate::complex::Cx;
use crate::particle_filter::{Dim, ParameterSpace, ParticleEnsemble, PosteriorMoments, ResamplingGradient, Support};
use crate::rng::{stream, Rng};
use crate::sensor_models_nv::{NvControls, NvParam, NvParams, NvSensor};
use crate::sensor_models_photonic::{
    apply_unitary_r, dolinar_step, encode_multiphase, multiphase_hypothesis, multiphase_likelihood,
    multiphase_means, poisson_from_uniform, poisson_prob_r, qml_coarse_grain,
};

/// Independent random streams of one episode.
pub(crate) struct EpisodeStreams {
    pub truth: Rng,
    pub prior: Rng,
    pub outcomes: Rng,
    pub resampling: Rng,
    pub policy: Rng,
}

impl EpisodeStreams {
    pub fn new(seed: u64) -> Self {
        EpisodeStreams {
            truth: stream(seed, &[0]),
            prior: stream(seed, &[1]),
            outcomes: stream(seed, &[2]),
            resampling: stream(seed, &[3]),
            policy: stream(seed, &[4]),
        }
    }
}

fn initial_ensemble<R: Real>(
    space: &Arc<ParameterSpace>,
    filter: &FilterSettings,
    rng: &mut Rng,
) -> ParticleEnsemble<R> {
    let base = ParticleEnsemble::init_from_prior(space.clone(), filter.particles, rng)
        .expect("prior sampling was validated when the task was built");
    let mut ens: ParticleEnsemble<R> = base.lift();
    ens.ess_threshold = if space.enumerable() == Some(filter.particles) { 0.0 } else { filter.ess_threshold };
    ens.jitter_scale = filter.jitter_scale;
    ens.resampling_gradient = filter.resampling_gradient;
    ens
}

fn check_prior(space: &Arc<ParameterSpace>, filter: &FilterSettings) -> Result<(), TaskError> {
    let mut rng = stream(0, &[]);
    space.sample_uniform(&mut rng)?;
    ParticleEnsemble::init_from_prior(space.clone(), filter.particles, &mut rng)?;
    Ok(())
}

/// Resamples when needed, recording the score of the drawn indices.
fn maybe_resample<R: Real>(ens: &mut ParticleEnsemble<R>, rng: &mut Rng, tr: &mut EpisodeTrace<R>, next_step: usize) -> bool {
    if ens.ess_threshold > 0.0 && ens.needs_resampling() {
        let r = ens.resample(rng);
        if ens.resampling_gradient == ResamplingGradient::Configuration {
            tr.scores.push(Score { log_prob: r.log_prob, first_step: next_step });
        }
        true
    } else {
        false
    }
}

fn marginal_values<R: Real>(ens: &ParticleEnsemble<R>, disc: usize) -> Vec<f64> {
    ens.discrete_marginal(disc).iter().map(|p| p.val()).collect()
}

fn agent_outputs<R: Real>(
    agent: &dyn Agent,
    query: Query,
    stop_input_gradient: bool,
    features: impl FnOnce(InputMode) -> Vec<R>,
) -> Vec<R> {
    let mut inputs = features(agent.input_mode());
    if stop_input_gradient {
        inputs = inputs.iter().map(|x| R::cst(x.val())).collect();
    }
    R::agent(agent, query, &inputs)
}

// ---------------------------------------------------------------------------
// NV magnetometry

/// Sequential Ramsey experiments on an NV centre.
#[derive(Clone, Debug)]
pub struct NvTask {
    pub sensor: NvSensor,
    pub space: Arc<ParameterSpace>,
    /// Model parameter held by each dimension of `space`.
    pub estimated: Vec<NvParam>,
    /// Values of the parameters that are not estimated.
    pub fixed: NvParams,
    /// Diagonal of the error weight matrix, one entry per dimension.
    pub weights: Vec<f64>,
    pub budget: Budget,
    /// Prefactor `h` of the control map, μs.
    pub h: f64,
    pub filter: FilterSettings,
    /// Divide each loss term by `η` (cumulative loss only).
    pub eta: Option<EtaForm>,
    /// Coefficient of the inverse-time heuristic.
    pub inverse_time_alpha: f64,
    pub inverse_time_literal: bool,
    /// Support of `τ⁻¹` for the random heuristic.
    pub random_inv_tau: (f64, f64),
}

impl NvTask {
    /// Builds the task and checks that its prior can be sampled.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sensor: NvSensor,
        priors: &[(NvParam, f64, f64)],
        fixed: NvParams,
        weights: Vec<f64>,
        budget: Budget,
        h: f64,
        filter: FilterSettings,
    ) -> Result<Self, TaskError> {
        let dims: Vec<Dim> = priors.iter().map(|(p, lo, hi)| Dim::continuous(p.name(), *lo, *hi)).collect();
        let estimated: Vec<NvParam> = priors.iter().map(|(p, _, _)| *p).collect();
        if weights.len() != estimated.len() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(TaskError::Invalid("one nonnegative error weight per estimated parameter is required".into()));
        }
        if !(h > 0.0) {
            return Err(TaskError::Invalid("prefactor h must be positive".into()));
        }
        let support = match (estimated.iter().position(|p| *p == NvParam::Omega0), estimated.iter().position(|p| *p == NvParam::Omega1)) {
            (Some(lo), Some(hi)) => Some(Support::Ordered { lo, hi }),
            _ => None,
        };
        let space = Arc::new(ParameterSpace::new(dims, support)?);
        check_prior(&space, &filter)?;
        let bounds = continuous_bounds(&space);
        let lo_inv = 1.0 / h;
        let random_inv_tau = match estimated.iter().position(|p| *p == NvParam::InvT2) {
            Some(i) if sensor.model == crate::sensor_models_nv::NvModel::Decoherence => bounds[i],
            _ => (lo_inv.min(1.0), 1.0f64.max(lo_inv)),
        };
        Ok(NvTask {
            sensor,
            space,
            estimated,
            fixed,
            weights,
            budget,
            h,
            filter,
            eta: None,
            inverse_time_alpha: crate::bounds::printed::ALPHA_M,
            inverse_time_literal: false,
            random_inv_tau,
        })
    }

    pub fn params_at(&self, x: &[f64]) -> NvParams {
        let mut p = self.fixed;
        for (k, &name) in self.estimated.iter().enumerate() {
            p.set(name, x[k]);
        }
        p
    }

    /// `Σ G_ii (θ̂_i − θ_i)²`.
    pub fn error<R: Real>(&self, mean: &[R], truth: &[f64]) -> R {
        let sq: Vec<R> = mean.iter().zip(truth).map(|(m, t)| (*m - *t) * (*m - *t)).collect();
        R::dot(&sq, &self.weights)
    }

    pub fn n_inputs(&self) -> usize {
        let d = self.space.dim();
        d * d + 2 * d + 2
    }

    pub fn n_outputs(&self) -> usize {
        if self.sensor.model.has_phase(self.sensor.hyperfine_phase) {
            2
        } else {
            1
        }
    }

    fn estimate(&self, m: &PosteriorMoments<f64>, p: NvParam) -> f64 {
        match self.estimated.iter().position(|q| *q == p) {
            Some(i) => m.mean[i],
            None => self.fixed.get(p),
        }
    }

    fn target_dims(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    fn progress(&self, steps: usize, elapsed: f64) -> f64 {
        match self.budget {
            Budget::Measurements(m) => steps as f64 / (m.max(2) - 1) as f64,
            Budget::TotalTime { max, .. } | Budget::Photons { max, .. } => elapsed / max,
        }
    }

    fn heuristic_control(
        &self,
        which: Heuristic,
        ens: &ParticleEnsemble<f64>,
        steps: usize,
        elapsed: f64,
        rng: &mut Rng,
    ) -> NvControls {
        let m = ens.moments();
        let trace_target = || self.target_dims().iter().map(|&i| m.cov(i, i).val()).sum::<f64>();
        let c = match which {
            Heuristic::Pgh => pgh_control(ens, &self.target_dims(), rng),
            Heuristic::SigmaInverse => sigma_inverse_control(trace_target(), 0.0, SigmaVariant::Plain),
            Heuristic::SigmaInverseT2 => {
                sigma_inverse_control(trace_target(), self.estimate(&m, NvParam::InvT2), SigmaVariant::WithCoherence)
            }
            Heuristic::InverseTime => {
                let inv_t = self.estimate(&m, NvParam::InvT2).max(1e-12);
                let beta = self.estimate(&m, NvParam::Beta).max(1e-3);
                inverse_time_control(inv_t, beta, self.inverse_time_alpha, self.inverse_time_literal)
            }
            Heuristic::Random => random_control(self.random_inv_tau, rng),
            Heuristic::Ramp => ramp_control(self.h, self.progress(steps, elapsed)),
            Heuristic::EqualSplit => unreachable!("policy support is checked before rollouts"),
        };
        NvControls::new(c.tau.clamp(MIN_TAU, MAX_TAU), c.phi)
    }

    pub fn supports(&self, h: Heuristic) -> bool {
        h != Heuristic::EqualSplit
    }

    pub fn rollout<R: Real>(&self, policy: Policy<'_>, seed: u64, opts: &RolloutOptions) -> EpisodeTrace<R> {
        let mut rs = EpisodeStreams::new(seed);
        let truth = match &opts.truth {
            Some(t) => t.clone(),
            None => self.space.sample_uniform(&mut rs.truth).expect("prior sampling was validated"),
        };
        let true_params = self.params_at(&truth);
        let mut ens: ParticleEnsemble<R> = initial_ensemble(&self.space, &self.filter, &mut rs.prior);
        let bounds = continuous_bounds(&self.space);
        let horizon = self.budget.horizon();
        let r_max = self.budget.amount();
        let with_phase = self.sensor.model.has_phase(self.sensor.hyperfine_phase);
        let eta_term = self.eta.map(|form| super::loss::eta_prior_term(&self.weights, &bounds, form));

        let mut tr = EpisodeTrace::new(truth.clone());
        let mut m = ens.moments();
        tr.prior_error = self.error(&m.mean, &truth).val();
        let mut elapsed = R::zero();
        let mut tally = 0.0;
        let mut t = 0usize;
        while !self.budget.exhausted(t, tally) {
            let resource = match self.budget {
                Budget::Measurements(_) => R::cst(t as f64),
                _ => elapsed,
            };
            let features = |mode: InputMode| -> Vec<R> {
                match mode {
                    InputMode::Features => featurize_nv(&m, &bounds, t, horizon, resource, r_max, self.filter.sigma_cap),
                    InputMode::ResourceStep => {
                        vec![resource * (2.0 / r_max) - 1.0, R::cst(2.0 * t as f64 / horizon.max(1) as f64 - 1.0)]
                    }
                    InputMode::None => Vec::new(),
                }
            };
            if let Some(mode) = opts.record_inputs {
                tr.inputs.push(features(mode).iter().map(|x| x.val()).collect());
            }
            let (tau, phi) = match policy {
                Policy::Agent(a) => {
                    let out = agent_outputs(a, Query::new(t), self.filter.stop_input_gradient, features);
                    nv_control(&out, self.h, with_phase)
                }
                Policy::Heuristic(hh) => {
                    let plain = ParticleEnsemble::from_particles(self.space.clone(), ens.particles().to_vec(), ens.weight_values());
                    let c = self.heuristic_control(hh, &plain, t, elapsed.val(), &mut rs.policy);
                    (R::cst(c.tau), R::cst(if with_phase { c.phi } else { 0.0 }))
                }
            };
            let c = NvControls::new(tau.val(), phi.val());
            let u: f64 = rs.outcomes.random();
            let y = self.sensor.outcome_from_uniform(&true_params, c, u);
            tr.scores.push(Score { log_prob: self.sensor.likelihood_r(y, &true_params, tau, phi).ln(), first_step: t });
            let lik: Vec<R> =
                (0..ens.len()).map(|i| self.sensor.likelihood_r(y, &self.params_at(ens.particle(i)), tau, phi)).collect();
            if ens.bayes_update(&lik).is_err() {
                tr.aborted = true;
                break;
            }
            elapsed += tau;
            t += 1;
            tally = match self.budget {
                Budget::Measurements(_) => t as f64,
                _ => elapsed.val(),
            };
            m = ens.moments();
            let err = self.error(&m.mean, &truth);
            let loss = match eta_term {
                // 1/η = max(1/prior_term, T).
                Some(a) => err * elapsed.max_r(R::cst(1.0 / a)),
                None => err,
            };
            tr.push_step(loss, err.val(), tally, vec![c.tau, c.phi], vec![y as i64], ens.effective_sample_size());
            if maybe_resample(&mut ens, &mut rs.resampling, &mut tr, t) {
                m = ens.moments();
            }
        }
        tr
    }
}

const MIN_TAU: f64 = 1e-3;
const MAX_TAU: f64 = 1e6;

// ---------------------------------------------------------------------------
// Agnostic Dolinar receiver

/// Sign discrimination of `|±α⟩` with `n` reference copies of `|α⟩`.
#[derive(Clone, Debug)]
pub struct DolinarTask {
    pub space: Arc<ParameterSpace>,
    pub copies: usize,
    pub variant: u8,
    pub filter: FilterSettings,
}

pub const DOLINAR_INPUTS: usize = 9;

impl DolinarTask {
    pub fn new(alpha_range: (f64, f64), copies: usize, variant: u8, filter: FilterSettings) -> Result<Self, TaskError> {
        if copies == 0 {
            return Err(TaskError::Invalid("the Dolinar receiver needs at least one reference copy".into()));
        }
        if variant >= super::loss::DOLINAR_VARIANTS {
            return Err(TaskError::Invalid(format!("Dolinar loss variant {variant} is not in 0..9")));
        }
        let space = Arc::new(ParameterSpace::new(
            vec![Dim::continuous("alpha", alpha_range.0, alpha_range.1), Dim::discrete("sign", 2)],
            None,
        )?);
        check_prior(&space, &filter)?;
        Ok(DolinarTask { space, copies, variant, filter })
    }

    pub fn supports(&self, h: Heuristic) -> bool {
        matches!(h, Heuristic::EqualSplit | Heuristic::Random)
    }

    /// A truth with the given amplitude and a random sign.
    pub fn truth_at(&self, alpha: f64, rng: &mut Rng) -> Vec<f64> {
        vec![alpha, if rng.random::<bool>() { 0.0 } else { 1.0 }]
    }

    pub fn rollout<R: Real>(&self, policy: Policy<'_>, seed: u64, opts: &RolloutOptions) -> EpisodeTrace<R> {
        let mut rs = EpisodeStreams::new(seed);
        let truth = match &opts.truth {
            Some(t) => t.clone(),
            None => self.space.sample_uniform(&mut rs.truth).expect("prior sampling was validated"),
        };
        let (alpha, sign) = (truth[0], truth[1] as usize);
        let n = self.copies;
        let p_h = if self.variant >= 3 { helstrom(alpha, Some(n as u64)) } else { 1.0 };
        let mut ens: ParticleEnsemble<R> = initial_ensemble(&self.space, &self.filter, &mut rs.prior);
        let mut tr = EpisodeTrace::new(truth.clone());
        tr.prior_error = 0.5;
        let mut g = [R::one(), -R::one()];
        let mut n_phot = 0u32;
        for t in 0..n {
            let features = |mode: InputMode| -> Vec<R> {
                if mode != InputMode::Features {
                    return Vec::new();
                }
                let mut f = Vec::with_capacity(DOLINAR_INPUTS);
                let mut p_plus = R::zero();
                for s in 0..2 {
                    let (mass, mom) = ens.conditional_moments(1, s);
                    if s == 0 {
                        p_plus = mass;
                    }
                    let a_hat = mom.mean[0];
                    let psi = a_hat * g[s];
                    f.push(psi * psi);
                    f.push(a_hat);
                    f.push(rescaled_sigma(mom.cov(0, 0), self.filter.sigma_cap));
                }
                f.push(p_plus * 2.0 - 1.0);
                f.push(R::cst(2.0 * t as f64 / n as f64 - 1.0));
                f.push(R::cst(if n_phot.is_multiple_of(2) { 1.0 } else { -1.0 }));
                f
            };
            if let Some(mode) = opts.record_inputs {
                tr.inputs.push(features(mode).iter().map(|x| x.val()).collect());
            }
            let theta = match policy {
                Policy::Agent(a) => agent_outputs(a, Query::new(t), self.filter.stop_input_gradient, features)[0],
                Policy::Heuristic(Heuristic::EqualSplit) => R::cst(equal_split_control(t, n).theta),
                Policy::Heuristic(Heuristic::Random) => R::cst(rs.policy.random_range(0.0..PI / 2.0)),
                Policy::Heuristic(_) => unreachable!("policy support is checked before rollouts"),
            };
            let step = dolinar_step(R::one(), g, theta, n_phot);
            let last = t + 1 == n;
            let a2 = alpha * alpha;
            let mean = step.measured_mean[sign] * a2;
            let k = poisson_from_uniform(mean.val(), rs.outcomes.random());
            let mut score = poisson_prob_r(mean, k);
            let mut counts = vec![k as i64];
            let k2 = if last {
                let m2 = step.next_signal[sign] * step.next_signal[sign] * a2;
                let k2 = poisson_from_uniform(m2.val(), rs.outcomes.random());
                score = score * poisson_prob_r(m2, k2);
                counts.push(k2 as i64);
                Some(k2)
            } else {
                None
            };
            tr.scores.push(Score { log_prob: score.ln(), first_step: t });
            let lik: Vec<R> = (0..ens.len())
                .map(|i| {
                    let p = ens.particle(i);
                    let (a2i, s) = (p[0] * p[0], p[1] as usize);
                    let mut l = poisson_prob_r(step.measured_mean[s] * a2i, k);
                    if let Some(k2) = k2 {
                        let ns = step.next_signal[s];
                        l = l * poisson_prob_r(ns * ns * a2i, k2);
                    }
                    l
                })
                .collect();
            if ens.bayes_update(&lik).is_err() {
                tr.aborted = true;
                break;
            }
            n_phot += k + k2.unwrap_or(0);
            g = step.next_signal;
            let p_plus = ens.discrete_marginal(1)[0];
            let truth_sign = Sign::from_index(sign);
            let loss = dolinar_loss(self.variant, p_plus, truth_sign, n_phot, p_h);
            let err = dolinar_loss::<f64>(0, p_plus.val(), truth_sign, n_phot, p_h);
            tr.push_step(loss, err, (t + 1) as f64, vec![theta.val()], counts, ens.effective_sample_size());
            maybe_resample(&mut ens, &mut rs.resampling, &mut tr, t + 1);
        }
        tr
    }
}

// ---------------------------------------------------------------------------
// Three-state classifier with unknown training states

/// Classification of `|α_s⟩` against `n` copies of three unknown states.
#[derive(Clone, Debug)]
pub struct QmlTask {
    pub space: Arc<ParameterSpace>,
    pub alpha: f64,
    pub copies: usize,
    pub filter: FilterSettings,
}

pub const QML_INPUTS: usize = 19;
const QML_CLASS_DIM: usize = 6;

impl QmlTask {
    pub fn new(alpha: f64, copies: usize, filter: FilterSettings) -> Result<Self, TaskError> {
        if copies == 0 || !(alpha > 0.0) {
            return Err(TaskError::Invalid("the classifier needs α > 0 and at least one copy".into()));
        }
        let mut dims = Vec::new();
        for j in 0..3 {
            dims.push(Dim::continuous(&format!("alpha{j}_re"), -alpha, alpha));
            dims.push(Dim::continuous(&format!("alpha{j}_im"), -alpha, alpha));
        }
        dims.push(Dim::discrete("class", 3));
        let space = Arc::new(ParameterSpace::new(dims, None)?);
        check_prior(&space, &filter)?;
        Ok(QmlTask { space, alpha, copies, filter })
    }

    pub fn horizon(&self) -> usize {
        3 * self.copies
    }

    pub fn supports(&self, h: Heuristic) -> bool {
        matches!(h, Heuristic::EqualSplit | Heuristic::Random)
    }

    /// Mean photon number `n Σ|α_j|² + |α_s|²` of an instance.
    pub fn photons(&self, truth: &[f64]) -> f64 {
        let e = |j: usize| truth[2 * j].powi(2) + truth[2 * j + 1].powi(2);
        self.copies as f64 * (e(0) + e(1) + e(2)) + e(truth[QML_CLASS_DIM] as usize)
    }

    pub fn rollout<R: Real>(&self, policy: Policy<'_>, seed: u64, opts: &RolloutOptions) -> EpisodeTrace<R> {
        let mut rs = EpisodeStreams::new(seed);
        let truth = match &opts.truth {
            Some(t) => t.clone(),
            None => self.space.sample_uniform(&mut rs.truth).expect("prior sampling was validated"),
        };
        let s_true = truth[QML_CLASS_DIM] as usize;
        let steps = self.horizon();
        let mut ens: ParticleEnsemble<R> = initial_ensemble(&self.space, &self.filter, &mut rs.prior);
        let mut tr = EpisodeTrace::new(truth.clone());
        tr.prior_error = 2.0 / 3.0;
        // Signal amplitude under class s as a combination Σ_j K[s][j] α_j.
        let mut k_coef: [[Cx<R>; 3]; 3] = std::array::from_fn(|s| std::array::from_fn(|j| Cx::real(R::cst(if s == j { 1.0 } else { 0.0 }))));
        let mut path: Vec<u8> = Vec::with_capacity(steps);
        let mut consumed = 0.0;
        let energy = |x: &[f64], j: usize| x[2 * j].powi(2) + x[2 * j + 1].powi(2);
        for t in 0..steps {
            let r = t % 3;
            let features = |mode: InputMode| -> Vec<R> {
                if mode != InputMode::Features {
                    return Vec::new();
                }
                self.features(&ens, &k_coef, t, steps)
            };
            if let Some(mode) = opts.record_inputs {
                tr.inputs.push(features(mode).iter().map(|x| x.val()).collect());
            }
            let (theta, phi) = match policy {
                Policy::Agent(a) => {
                    let q = if a.kind() == AgentKind::Tree { Query::with_path(t, path.clone()) } else { Query::new(t) };
                    let out = agent_outputs(a, q, self.filter.stop_input_gradient, features);
                    (out[0], if out.len() > 1 { out[1] } else { R::zero() })
                }
                Policy::Heuristic(Heuristic::EqualSplit) => (R::cst(equal_split_control(t, steps).theta), R::zero()),
                Policy::Heuristic(Heuristic::Random) => {
                    (R::cst(rs.policy.random_range(0.0..PI / 2.0)), R::cst(rs.policy.random_range(0.0..2.0 * PI)))
                }
                Policy::Heuristic(_) => unreachable!("policy support is checked before rollouts"),
            };
            let (c, sn) = (theta.cos(), theta.sin());
            let e = Cx::cis(phi);
            let e_conj_s = e.conj().scale(sn);
            let e_s = e.scale(sn);
            let mut measured = k_coef;
            let mut next = k_coef;
            for s in 0..3 {
                for j in 0..3 {
                    let kk = k_coef[s][j];
                    let delta = if j == r { R::one() } else { R::zero() };
                    measured[s][j] = Cx::real(delta * c) - kk * e_conj_s;
                    next[s][j] = kk.scale(c) + if j == r { e_s } else { Cx::zero() };
                }
            }
            let last = t + 1 == steps;
            let mean_at = |coef: &[[Cx<R>; 3]; 3], x: &[f64]| -> R { amplitude_sq(&coef[x[QML_CLASS_DIM] as usize], x) };
            let mean = mean_at(&measured, &truth);
            let k = poisson_from_uniform(mean.val(), rs.outcomes.random());
            let mut score = poisson_prob_r(mean, k);
            let mut counts = vec![k as i64];
            consumed += energy(&truth, r);
            let k2 = if last {
                let m2 = mean_at(&next, &truth);
                let k2 = poisson_from_uniform(m2.val(), rs.outcomes.random());
                score = score * poisson_prob_r(m2, k2);
                counts.push(k2 as i64);
                consumed += energy(&truth, s_true);
                Some(k2)
            } else {
                None
            };
            tr.scores.push(Score { log_prob: score.ln(), first_step: t });
            let lik: Vec<R> = (0..ens.len())
                .map(|i| {
                    let x = ens.particle(i);
                    let mut l = poisson_prob_r(mean_at(&measured, x), k);
                    if let Some(k2) = k2 {
                        l = l * poisson_prob_r(mean_at(&next, x), k2);
                    }
                    l
                })
                .collect();
            if ens.bayes_update(&lik).is_err() {
                tr.aborted = true;
                break;
            }
            path.push(qml_coarse_grain(k, self.alpha));
            k_coef = next;
            let err = classification_loss(&marginal_values(&ens, QML_CLASS_DIM), s_true);
            tr.push_step(R::cst(err), err, consumed, vec![theta.val(), phi.val()], counts, ens.effective_sample_size());
            maybe_resample(&mut ens, &mut rs.resampling, &mut tr, t + 1);
        }
        tr
    }

    fn features<R: Real>(&self, ens: &ParticleEnsemble<R>, k_coef: &[[Cx<R>; 3]; 3], t: usize, steps: usize) -> Vec<R> {
        let n = ens.len();
        let w = ens.weights();
        let mut f = Vec::with_capacity(QML_INPUTS);
        // Posterior-averaged signal amplitude Σ_s Σ_j K[s][j] E[α_j 1{s}].
        let mut psi = Cx::zero();
        let mut col = vec![0.0; n];
        for s in 0..3 {
            for j in 0..3 {
                let mut part = [R::zero(); 2];
                for (c, slot) in part.iter_mut().enumerate() {
                    for i in 0..n {
                        let x = ens.particle(i);
                        col[i] = if x[QML_CLASS_DIM] as usize == s { x[2 * j + c] } else { 0.0 };
                    }
                    *slot = R::dot(w, &col);
                }
                psi = psi + k_coef[s][j] * Cx::new(part[0], part[1]);
            }
        }
        f.push(psi.re);
        f.push(psi.im);
        let m = ens.moments();
        f.extend(m.mean.iter().copied());
        for i in 0..6 {
            let v = m.cov(i, i);
            f.push(if v.val() > 0.0 { (v.ln() * -0.05).min_r(R::cst(self.filter.sigma_cap)) } else { R::cst(self.filter.sigma_cap) });
        }
        for p in ens.discrete_marginal(QML_CLASS_DIM) {
            f.push(p * 2.0 - 1.0);
        }
        f.push(R::cst(2.0 * t as f64 / steps as f64 - 1.0));
        f.push(R::cst((t % 3) as f64 - 1.0));
        f
    }
}

/// `|Σ_j coef_j α_j|²` with `α_j = x[2j] + i x[2j+1]`.
fn amplitude_sq<R: Real>(coef: &[Cx<R>; 3], x: &[f64]) -> R {
    let mut vars = Vec::with_capacity(6);
    let mut re_c = Vec::with_capacity(6);
    let mut im_c = Vec::with_capacity(6);
    for (j, k) in coef.iter().enumerate() {
        let (ar, ai) = (x[2 * j], x[2 * j + 1]);
        vars.push(k.re);
        vars.push(k.im);
        re_c.extend([ar, -ai]);
        im_c.extend([ai, ar]);
    }
    let re = R::dot(&vars, &re_c);
    let im = R::dot(&vars, &im_c);
    re * re + im * im
}

// ---------------------------------------------------------------------------
// Multiphase discrimination

/// Which of eight phase triples is imprinted on a four-arm interferometer.
#[derive(Clone, Debug)]
pub struct MultiphaseTask {
    pub space: Arc<ParameterSpace>,
    pub input: [Complex64; 4],
    pub encoded: [[Complex64; 4]; 8],
    pub measurements: usize,
}

pub const MULTIPHASE_INPUTS: usize = 10;

impl MultiphaseTask {
    pub fn new(input: [Complex64; 4], measurements: usize) -> Result<Self, TaskError> {
        let space = Arc::new(ParameterSpace::new(vec![Dim::discrete("hypothesis", 8)], None)?);
        let encoded = std::array::from_fn(|h| encode_multiphase(&input, multiphase_hypothesis(h)));
        Ok(MultiphaseTask { space, input, encoded, measurements })
    }

    pub fn photons_per_shot(&self) -> f64 {
        self.input.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn supports(&self, h: Heuristic) -> bool {
        h == Heuristic::Random
    }

    pub fn rollout<R: Real>(&self, policy: Policy<'_>, seed: u64, opts: &RolloutOptions) -> EpisodeTrace<R> {
        let mut rs = EpisodeStreams::new(seed);
        let truth = match &opts.truth {
            Some(t) => t.clone(),
            None => vec![rs.truth.random_range(0..8) as f64],
        };
        let h_true = truth[0] as usize;
        let filter = FilterSettings { particles: 8, ..FilterSettings::default() };
        let mut ens: ParticleEnsemble<R> = initial_ensemble(&self.space, &filter, &mut rs.prior);
        let mut tr = EpisodeTrace::new(truth.clone());
        tr.prior_error = 7.0 / 8.0;
        let per_shot = self.photons_per_shot();
        let n_max = per_shot * self.measurements as f64;
        for t in 0..self.measurements {
            let features = |mode: InputMode| -> Vec<R> {
                if mode != InputMode::Features {
                    return Vec::new();
                }
                let mut f: Vec<R> = ens.discrete_marginal(0);
                f.push(R::cst(2.0 * t as f64 / self.measurements as f64 - 1.0));
                let consumed = per_shot * t as f64;
                f.push(R::cst(if n_max > 0.0 { 2.0 * consumed / n_max - 1.0 } else { -1.0 }));
                f
            };
            if let Some(mode) = opts.record_inputs {
                tr.inputs.push(features(mode).iter().map(|x| x.val()).collect());
            }
            let controls: [R; 3] = match policy {
                Policy::Agent(a) => {
                    let out = agent_outputs(a, Query::new(t), false, features);
                    std::array::from_fn(|j| out[j] * (2.0 * PI))
                }
                Policy::Heuristic(Heuristic::Random) => std::array::from_fn(|_| R::cst(rs.policy.random_range(0.0..2.0 * PI))),
                Policy::Heuristic(_) => unreachable!("policy support is checked before rollouts"),
            };
            let cv = controls.map(|c| c.val());
            let means = multiphase_means::<f64>(&self.encoded[h_true], cv);
            let counts: [u32; 4] = std::array::from_fn(|j| poisson_from_uniform(means[j], rs.outcomes.random()));
            let score = multiphase_likelihood(&self.encoded[h_true], controls, &counts);
            tr.scores.push(Score { log_prob: score.ln(), first_step: t });
            let lik: Vec<R> = (0..ens.len())
                .map(|i| multiphase_likelihood(&self.encoded[ens.particle(i)[0] as usize], controls, &counts))
                .collect();
            if ens.bayes_update(&lik).is_err() {
                tr.aborted = true;
                break;
            }
            let err = classification_loss(&marginal_values(&ens, 0), h_true);
            tr.push_step(
                R::cst(err),
                err,
                per_shot * (t + 1) as f64,
                cv.to_vec(),
                counts.iter().map(|&k| k as i64).collect(),
                ens.effective_sample_size(),
            );
        }
        tr
    }
}

// ---------------------------------------------------------------------------
// Static beam-splitter network classifier

/// Classification of `|α_s⟩` among `d` known symmetric coherent states.
#[derive(Clone, Debug)]
pub struct BsClassifierTask {
    pub space: Arc<ParameterSpace>,
    pub states: Vec<Complex64>,
    pub layers: usize,
}

impl BsClassifierTask {
    /// States `α e^{2πij/d}`, `j = 0..d`.
    pub fn new(d: usize, alpha: f64, layers: usize) -> Result<Self, TaskError> {
        if d < 2 || layers == 0 {
            return Err(TaskError::Invalid("the network classifier needs d ≥ 2 and at least one layer".into()));
        }
        let space = Arc::new(ParameterSpace::new(vec![Dim::discrete("class", d)], None)?);
        let states = (0..d).map(|j| Complex64::from_polar(alpha, 2.0 * PI * j as f64 / d as f64)).collect();
        Ok(BsClassifierTask { space, states, layers })
    }

    pub fn modes(&self) -> usize {
        self.states.len() + 1
    }

    pub fn supports(&self, h: Heuristic) -> bool {
        h == Heuristic::Random
    }

    pub fn rollout<R: Real>(&self, policy: Policy<'_>, seed: u64, opts: &RolloutOptions) -> EpisodeTrace<R> {
        let mut rs = EpisodeStreams::new(seed);
        let d = self.states.len();
        let n = self.modes();
        let truth = match &opts.truth {
            Some(t) => t.clone(),
            None => vec![rs.truth.random_range(0..d) as f64],
        };
        let s_true = truth[0] as usize;
        let filter = FilterSettings { particles: d, ..FilterSettings::default() };
        let mut ens: ParticleEnsemble<R> = initial_ensemble(&self.space, &filter, &mut rs.prior);
        let mut tr = EpisodeTrace::new(truth.clone());
        tr.prior_error = 1.0 - 1.0 / d as f64;
        let unitaries: Vec<R> = match policy {
            Policy::Agent(a) => R::agent(a, Query::new(0), &[]),
            Policy::Heuristic(Heuristic::Random) => {
                let net = crate::agents::BsNetworkAgent::random(n, self.layers, 1.0, &mut rs.policy);
                let mut out = vec![0.0; net.n_outputs()];
                net.forward(&Query::new(0), &mut out);
                out.into_iter().map(R::cst).collect()
            }
            Policy::Heuristic(_) => unreachable!("policy support is checked before rollouts"),
        };
        let inputs: Vec<Vec<Complex64>> = (0..d)
            .map(|s| {
                let mut v = vec![self.states[s]];
                v.extend_from_slice(&self.states);
                v
            })
            .collect();
        let block = 2 * n * n;
        for l in 0..self.layers {
            let o = &unitaries[block * l..block * (l + 1)];
            let u: Vec<Cx<R>> = (0..n * n).map(|i| Cx::new(o[i], o[n * n + i])).collect();
            let means: Vec<Vec<R>> =
                inputs.iter().map(|v| apply_unitary_r(&u, v).into_iter().map(|z| z.norm_sqr()).collect()).collect();
            let counts: Vec<u32> =
                means[s_true].iter().map(|m| poisson_from_uniform(m.val(), rs.outcomes.random())).collect();
            let lik_of = |s: usize| -> R {
                let mut p = R::one();
                for (m, &k) in means[s].iter().zip(&counts) {
                    p = p * poisson_prob_r(*m, k);
                }
                p
            };
            tr.scores.push(Score { log_prob: lik_of(s_true).ln(), first_step: l });
            let lik: Vec<R> = (0..ens.len()).map(|i| lik_of(ens.particle(i)[0] as usize)).collect();
            if ens.bayes_update(&lik).is_err() {
                tr.aborted = true;
                break;
            }
            let err = classification_loss(&marginal_values(&ens, 0), s_true);
            tr.push_step(
                R::cst(err),
                err,
                (l + 1) as f64,
                Vec::new(),
                counts.iter().map(|&k| k as i64).collect(),
                ens.effective_sample_size(),
            );
        }
        tr
    }
}
