//! Ramsey-measurement outcome models for NV-center sensing tasks.
//!
//! Frequencies are in MHz and times in μs throughout, so every product such
//! as `ω·τ` is a dimensionless phase.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::rng::Rng;

/// Probabilities are kept inside `[P_EPS, 1 - P_EPS]` before any logarithm.
pub const P_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NvModel {
    /// Static field: `p(±1) = ½ ± ½ e^{-τ/T2} cos(ωτ + φ)`.
    Dc,
    /// Oscillating field of known drive frequency.
    Ac,
    /// Stretched-exponential decay with unknown `1/T` and exponent `β`.
    Decoherence,
    /// Two hyperfine-split lines `ω0 < ω1`.
    Hyperfine,
}

/// Names of the model parameters, as used in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NvParam {
    Omega,
    BigOmega,
    InvT2,
    Beta,
    Omega0,
    Omega1,
}

impl NvParam {
    pub const ALL: [NvParam; 6] =
        [NvParam::Omega, NvParam::BigOmega, NvParam::InvT2, NvParam::Beta, NvParam::Omega0, NvParam::Omega1];

    pub fn name(self) -> &'static str {
        match self {
            NvParam::Omega => "omega",
            NvParam::BigOmega => "big_omega",
            NvParam::InvT2 => "inv_t2",
            NvParam::Beta => "beta",
            NvParam::Omega0 => "omega0",
            NvParam::Omega1 => "omega1",
        }
    }

    pub fn from_name(s: &str) -> Option<NvParam> {
        NvParam::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl NvModel {
    /// Parameters the outcome probability depends on.
    pub fn parameters(self) -> &'static [NvParam] {
        match self {
            NvModel::Dc => &[NvParam::Omega, NvParam::InvT2],
            NvModel::Ac => &[NvParam::BigOmega, NvParam::InvT2],
            NvModel::Decoherence => &[NvParam::InvT2, NvParam::Beta],
            NvModel::Hyperfine => &[NvParam::Omega0, NvParam::Omega1, NvParam::InvT2],
        }
    }

    /// Whether the phase `φ` is a control for this model.
    pub fn has_phase(self, hyperfine_phase: bool) -> bool {
        match self {
            NvModel::Dc => true,
            NvModel::Hyperfine => hyperfine_phase,
            NvModel::Ac | NvModel::Decoherence => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvParams {
    pub omega: f64,
    pub big_omega: f64,
    /// Known drive frequency of the AC field.
    pub omega_drive: f64,
    pub inv_t2: f64,
    pub beta: f64,
    pub omega0: f64,
    pub omega1: f64,
    /// Dephasing exponent of the DC model: 1 for `e^{-τ/T2}`, 2 for `e^{-(τ/T2)²}`.
    pub dephasing_exponent: u8,
}

impl Default for NvParams {
    fn default() -> Self {
        NvParams {
            omega: 0.0,
            big_omega: 0.0,
            omega_drive: 0.0,
            inv_t2: 0.0,
            beta: 1.0,
            omega0: 0.0,
            omega1: 0.0,
            dephasing_exponent: 1,
        }
    }
}

impl NvParams {
    pub fn get(&self, p: NvParam) -> f64 {
        match p {
            NvParam::Omega => self.omega,
            NvParam::BigOmega => self.big_omega,
            NvParam::InvT2 => self.inv_t2,
            NvParam::Beta => self.beta,
            NvParam::Omega0 => self.omega0,
            NvParam::Omega1 => self.omega1,
        }
    }

    pub fn set(&mut self, p: NvParam, v: f64) {
        match p {
            NvParam::Omega => self.omega = v,
            NvParam::BigOmega => self.big_omega = v,
            NvParam::InvT2 => self.inv_t2 = v,
            NvParam::Beta => self.beta = v,
            NvParam::Omega0 => self.omega0 = v,
            NvParam::Omega1 => self.omega1 = v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvControls {
    /// Free-evolution time in μs.
    pub tau: f64,
    pub phi: f64,
}

impl NvControls {
    pub fn new(tau: f64, phi: f64) -> Self {
        NvControls { tau, phi }
    }
}

/// `p(+1)` together with its derivatives with respect to `τ` and `φ`.
#[derive(Clone, Copy, Debug)]
pub struct ProbWithGrad {
    pub p: f64,
    pub dtau: f64,
    pub dphi: f64,
}

/// A single NV sensing model with its fixed options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NvSensor {
    pub model: NvModel,
    /// Whether `φ` enters the hyperfine cosines.
    pub hyperfine_phase: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum FisherError {
    #[error("outcome probability {0} is saturated; the Fisher information diverges")]
    Saturated(f64),
}

fn decay(tau: f64, g: f64, k: u8) -> (f64, f64, f64) {
    // Returns D, ∂D/∂τ, ∂D/∂g for D = exp(-(τ g)^k).
    if k == 2 {
        let x = tau * g;
        let d = (-x * x).exp();
        (d, -2.0 * x * g * d, -2.0 * x * tau * d)
    } else {
        let d = (-tau * g).exp();
        (d, -g * d, -tau * d)
    }
}

impl NvSensor {
    pub fn new(model: NvModel) -> Self {
        NvSensor { model, hyperfine_phase: true }
    }

    fn phase(&self, phi: f64) -> f64 {
        if self.model == NvModel::Hyperfine && !self.hyperfine_phase {
            0.0
        } else {
            phi
        }
    }

    /// Unclamped `p(+1)` with its control derivatives.
    pub fn prob_with_grad(&self, th: &NvParams, c: NvControls) -> ProbWithGrad {
        let tau = c.tau;
        match self.model {
            NvModel::Dc => {
                let (d, dd_tau, _) = decay(tau, th.inv_t2, th.dephasing_exponent);
                let arg = th.omega * tau + c.phi;
                let (s, co) = arg.sin_cos();
                ProbWithGrad {
                    p: 0.5 + 0.5 * d * co,
                    dtau: 0.5 * dd_tau * co - 0.5 * d * th.omega * s,
                    dphi: -0.5 * d * s,
                }
            }
            NvModel::Ac => {
                let d = (-tau * th.inv_t2).exp();
                let w = th.omega_drive;
                let (sw, cw) = (w * tau).sin_cos();
                let a = th.big_omega / w * sw;
                let (sa, ca) = a.sin_cos();
                ProbWithGrad {
                    p: 0.5 + 0.5 * d * ca,
                    dtau: -0.5 * th.inv_t2 * d * ca - 0.5 * d * sa * th.big_omega * cw,
                    dphi: 0.0,
                }
            }
            NvModel::Decoherence => {
                let y = tau * th.inv_t2;
                let x = y.powf(th.beta);
                let e = (-x).exp();
                let dtau = if tau > 0.0 { -0.5 * e * th.beta * x / tau } else { 0.0 };
                ProbWithGrad { p: 0.5 + 0.5 * e, dtau, dphi: 0.0 }
            }
            NvModel::Hyperfine => {
                let d = (-tau * th.inv_t2).exp();
                let phi = self.phase(c.phi);
                let (s0, c0) = (th.omega0 * tau + phi).sin_cos();
                let (s1, c1) = (th.omega1 * tau + phi).sin_cos();
                let dphi = if self.model == NvModel::Hyperfine && !self.hyperfine_phase { 0.0 } else { -0.25 * d * (s0 + s1) };
                ProbWithGrad {
                    p: 0.5 + 0.25 * d * (c0 + c1),
                    dtau: -0.25 * th.inv_t2 * d * (c0 + c1) - 0.25 * d * (th.omega0 * s0 + th.omega1 * s1),
                    dphi,
                }
            }
        }
    }

    /// `p(+1)` clamped into `[ε_p, 1 − ε_p]`.
    pub fn prob_plus(&self, th: &NvParams, c: NvControls) -> f64 {
        self.prob_with_grad(th, c).p.clamp(P_EPS, 1.0 - P_EPS)
    }

    pub fn likelihood(&self, outcome: i8, th: &NvParams, c: NvControls) -> f64 {
        let p = self.prob_plus(th, c);
        if outcome > 0 {
            p
        } else {
            1.0 - p
        }
    }

    /// Likelihood as a function of differentiable controls.
    pub fn likelihood_r<R: Real>(&self, outcome: i8, th: &NvParams, tau: R, phi: R) -> R {
        let g = self.prob_with_grad(th, NvControls::new(tau.val(), phi.val()));
        let clamped = g.p < P_EPS || g.p > 1.0 - P_EPS;
        let p = g.p.clamp(P_EPS, 1.0 - P_EPS);
        let (dt, dp) = if clamped { (0.0, 0.0) } else { (g.dtau, g.dphi) };
        if outcome > 0 {
            R::node(p, &[(tau, dt), (phi, dp)])
        } else {
            R::node(1.0 - p, &[(tau, -dt), (phi, -dp)])
        }
    }

    /// Outcome for a given uniform variate `u ∈ [0, 1)`.
    pub fn outcome_from_uniform(&self, th: &NvParams, c: NvControls, u: f64) -> i8 {
        if u < self.prob_with_grad(th, c).p {
            1
        } else {
            -1
        }
    }

    /// Bernoulli draw of the outcome with its log-probability.
    pub fn sample_outcome(&self, th: &NvParams, c: NvControls, rng: &mut Rng) -> (i8, f64) {
        let y = self.outcome_from_uniform(th, c, rng.random::<f64>());
        (y, self.likelihood(y, th, c).ln())
    }

    /// Analytic `∂p(+1)/∂θ_j` for every model parameter.
    pub fn prob_param_grad(&self, th: &NvParams, c: NvControls) -> Vec<(NvParam, f64)> {
        let tau = c.tau;
        match self.model {
            NvModel::Dc => {
                let (d, _, dd_g) = decay(tau, th.inv_t2, th.dephasing_exponent);
                let (s, co) = (th.omega * tau + c.phi).sin_cos();
                vec![(NvParam::Omega, -0.5 * d * tau * s), (NvParam::InvT2, 0.5 * dd_g * co)]
            }
            NvModel::Ac => {
                let d = (-tau * th.inv_t2).exp();
                let sw = (th.omega_drive * tau).sin();
                let (sa, ca) = (th.big_omega / th.omega_drive * sw).sin_cos();
                vec![
                    (NvParam::BigOmega, -0.5 * d * sa * sw / th.omega_drive),
                    (NvParam::InvT2, -0.5 * tau * d * ca),
                ]
            }
            NvModel::Decoherence => {
                let y = tau * th.inv_t2;
                let x = y.powf(th.beta);
                let e = (-x).exp();
                vec![
                    (NvParam::InvT2, -0.5 * e * th.beta * x / th.inv_t2),
                    (NvParam::Beta, -0.5 * e * x * y.ln()),
                ]
            }
            NvModel::Hyperfine => {
                let d = (-tau * th.inv_t2).exp();
                let phi = self.phase(c.phi);
                let (s0, c0) = (th.omega0 * tau + phi).sin_cos();
                let (s1, c1) = (th.omega1 * tau + phi).sin_cos();
                vec![
                    (NvParam::Omega0, -0.25 * d * tau * s0),
                    (NvParam::Omega1, -0.25 * d * tau * s1),
                    (NvParam::InvT2, -0.25 * tau * d * (c0 + c1)),
                ]
            }
        }
    }

    /// Single-measurement Fisher information `(∂p/∂θ_j)² / (p(1−p))`.
    pub fn fisher_information(&self, th: &NvParams, c: NvControls) -> Result<Vec<(NvParam, f64)>, FisherError> {
        let p = self.prob_with_grad(th, c).p;
        if !(p > 0.0 && p < 1.0) {
            return Err(FisherError::Saturated(p));
        }
        let grads = self.prob_param_grad(th, c);
        if self.model == NvModel::Dc {
            // p(1-p) = ¼(D²s² + 1 − D²), which keeps the ω entry equal to
            // τ² exactly when there is no dephasing.
            let (d, _, _) = decay(c.tau, th.inv_t2, th.dephasing_exponent);
            let s = (th.omega * c.tau + c.phi).sin();
            let var4 = d * d * s * s + (1.0 - d * d);
            let omega_fi = c.tau * c.tau * (d * d * s * s / var4);
            return Ok(grads
                .into_iter()
                .map(|(k, g)| if k == NvParam::Omega { (k, omega_fi) } else { (k, 4.0 * g * g / var4) })
                .collect());
        }
        let v = p * (1.0 - p);
        Ok(grads.into_iter().map(|(k, g)| (k, g * g / v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn dc(omega: f64, inv_t2: f64) -> NvParams {
        NvParams { omega, inv_t2, ..Default::default() }
    }

    #[test]
    fn dc_examples() {
        let s = NvSensor::new(NvModel::Dc);
        assert!((s.prob_plus(&dc(0.0, 0.0), NvControls::new(7.3, 0.0)) - (1.0 - P_EPS)).abs() < 1e-15);
        let p = s.prob_plus(&dc(std::f64::consts::PI / 2.0, 0.0), NvControls::new(2.0, 0.0));
        assert!(p < 1e-11);
        let p = s.prob_plus(&dc(0.0, 0.5), NvControls::new(2.0, 0.0));
        assert!((p - 0.683940).abs() < 1e-6);
        let a = s.prob_plus(&dc(0.3, 0.0), NvControls::new(2.0, 0.1));
        let b = s.prob_plus(&dc(0.3 + std::f64::consts::PI, 0.0), NvControls::new(2.0, 0.1));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ac_examples() {
        let s = NvSensor::new(NvModel::Ac);
        let th = NvParams { big_omega: 0.5, omega_drive: 0.2, ..Default::default() };
        let p = s.prob_plus(&th, NvControls::new(2.0, 0.0));
        let oracle = 0.5 + 0.5 * (2.5f64 * 0.4f64.sin()).cos();
        assert!((p - oracle).abs() < 1e-14);
        assert!((p - 0.781).abs() < 1e-3);
        let th0 = NvParams { big_omega: 0.0, omega_drive: 0.2, inv_t2: 0.1, ..Default::default() };
        assert!((s.prob_plus(&th0, NvControls::new(3.0, 0.0)) - (1.0 + (-0.3f64).exp()) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn decoherence_examples() {
        let s = NvSensor::new(NvModel::Decoherence);
        for beta in [1.0, 1.7, 3.0] {
            let th = NvParams { inv_t2: 0.1, beta, ..Default::default() };
            assert!((s.prob_plus(&th, NvControls::new(10.0, 0.0)) - 0.683940).abs() < 1e-6);
        }
        let th = NvParams { inv_t2: 0.1, beta: 2.0, ..Default::default() };
        assert!((s.prob_plus(&th, NvControls::new(20.0, 0.0)) - 0.509158).abs() < 1e-6);
        assert!(s.prob_plus(&th, NvControls::new(1e-9, 0.0)) > 1.0 - 1e-9);
    }

    #[test]
    fn hyperfine_examples() {
        let s = NvSensor::new(NvModel::Hyperfine);
        let th = NvParams { omega0: 0.2, omega1: 0.8, ..Default::default() };
        let oracle = 0.5 + 0.25 * (1f64.cos() + 4f64.cos());
        assert!((s.prob_plus(&th, NvControls::new(5.0, 0.0)) - oracle).abs() < 1e-12);
        assert!((oracle - 0.471688).abs() < 5e-5);
        let same = NvParams { omega0: 0.4, omega1: 0.4, inv_t2: 0.05, ..Default::default() };
        let d = NvSensor::new(NvModel::Dc);
        let c = NvControls::new(3.0, 0.7);
        assert!((s.prob_plus(&same, c) - d.prob_plus(&dc(0.4, 0.05), c)).abs() < 1e-15);
        let swapped = NvParams { omega0: 0.8, omega1: 0.2, ..Default::default() };
        assert_eq!(s.prob_plus(&th, c), s.prob_plus(&swapped, c));
        let no_phase = NvSensor { model: NvModel::Hyperfine, hyperfine_phase: false };
        assert_eq!(no_phase.prob_plus(&th, c), no_phase.prob_plus(&th, NvControls::new(3.0, 0.0)));
    }

    #[test]
    fn sampling_frequencies() {
        let s = NvSensor::new(NvModel::Dc);
        let mut rng = stream(11, &[]);
        let th = dc(0.0, 0.0);
        assert!((0..100).all(|_| s.sample_outcome(&th, NvControls::new(1.0, 0.0), &mut rng).0 == 1));
        let th = dc(std::f64::consts::PI, 0.0);
        assert!((0..100).all(|_| s.sample_outcome(&th, NvControls::new(1.0, 0.0), &mut rng).0 == -1));
        // cos(φ) = 0.4 gives p(+1) = 0.7.
        let c = NvControls::new(1.0, 0.4f64.acos());
        let hits = (0..100_000).filter(|_| s.sample_outcome(&dc(0.0, 0.0), c, &mut rng).0 == 1).count();
        assert!((hits as f64 / 1e5 - 0.7).abs() < 0.005);
    }

    #[test]
    fn fisher_examples() {
        let s = NvSensor::new(NvModel::Dc);
        for (omega, tau) in [(0.3, 2.0), (0.77, 13.0), (0.01, 40.0)] {
            let fi = s.fisher_information(&dc(omega, 0.0), NvControls::new(tau, 0.2)).unwrap();
            assert_eq!(fi[0].1, tau * tau);
        }
        let ac = NvSensor::new(NvModel::Ac);
        let th = NvParams { big_omega: 0.5, omega_drive: 0.2, inv_t2: 0.01, ..Default::default() };
        let fi = ac.fisher_information(&th, NvControls::new(std::f64::consts::PI / 0.2, 0.0)).unwrap();
        assert!(fi[0].1 < 1e-25);
        assert!(matches!(s.fisher_information(&dc(0.0, 0.0), NvControls::new(1.0, 0.0)), Err(FisherError::Saturated(_))));
    }

    #[test]
    fn control_gradients_match_finite_differences() {
        let models = [
            (NvModel::Dc, NvParams { omega: 0.37, inv_t2: 0.05, ..Default::default() }),
            (NvModel::Dc, NvParams { omega: 0.37, inv_t2: 0.05, dephasing_exponent: 2, ..Default::default() }),
            (NvModel::Ac, NvParams { big_omega: 0.6, omega_drive: 0.2, inv_t2: 0.02, ..Default::default() }),
            (NvModel::Decoherence, NvParams { inv_t2: 0.04, beta: 2.3, ..Default::default() }),
            (NvModel::Hyperfine, NvParams { omega0: 0.2, omega1: 0.7, inv_t2: 0.03, ..Default::default() }),
        ];
        for (m, th) in models {
            let s = NvSensor::new(m);
            let c = NvControls::new(6.3, 0.4);
            let g = s.prob_with_grad(&th, c);
            let h = 1e-6;
            let ft = (s.prob_with_grad(&th, NvControls::new(c.tau + h, c.phi)).p
                - s.prob_with_grad(&th, NvControls::new(c.tau - h, c.phi)).p)
                / (2.0 * h);
            let fp = (s.prob_with_grad(&th, NvControls::new(c.tau, c.phi + h)).p
                - s.prob_with_grad(&th, NvControls::new(c.tau, c.phi - h)).p)
                / (2.0 * h);
            assert!((g.dtau - ft).abs() < 1e-8, "{m:?}");
            assert!((g.dphi - fp).abs() < 1e-8, "{m:?}");
        }
    }

    #[test]
    fn outcome_probabilities_sum_to_one() {
        let s = NvSensor::new(NvModel::Hyperfine);
        let th = NvParams { omega0: 0.3, omega1: 0.9, inv_t2: 0.1, ..Default::default() };
        let c = NvControls::new(4.2, 1.1);
        assert_eq!(s.likelihood(1, &th, c) + s.likelihood(-1, &th, c), 1.0);
    }
}
