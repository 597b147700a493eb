//! Passive linear optics on coherent states and photon counting.
//!
//! Coherent inputs stay coherent under passive unitaries, so a register is
//! just a vector of complex amplitudes and every detector count is Poisson
//! with mean `|amplitude|²`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::Real;
use crate::complex::Cx;
use crate::rng::Rng;

/// Poisson sampling stops once the remaining tail mass is below this.
pub const POISSON_TAIL: f64 = 1e-14;

#[derive(Debug, Error, PartialEq)]
pub enum PhotonicError {
    #[error("register has {got} modes, expected {expected}")]
    Shape { expected: usize, got: usize },
}

#[derive(Clone, Debug)]
pub struct CoherentRegister<R = f64> {
    pub amps: Vec<Cx<R>>,
}

impl<R: Real> CoherentRegister<R> {
    pub fn new(amps: Vec<Cx<R>>) -> Self {
        CoherentRegister { amps }
    }

    pub fn from_c64(amps: &[Complex64]) -> Self {
        CoherentRegister { amps: amps.iter().map(|&z| Cx::from_c64(z)).collect() }
    }

    pub fn modes(&self) -> usize {
        self.amps.len()
    }

    /// Mean photon number per mode.
    pub fn means(&self) -> Vec<R> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn total_photons(&self) -> R {
        R::sum(&self.means())
    }

    pub fn values(&self) -> Vec<Complex64> {
        self.amps.iter().map(|a| a.value()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsControl {
    pub theta: f64,
    pub phi: f64,
}

/// `(a, b) → (a cosθ + b e^{iφ} sinθ, −a e^{−iφ} sinθ + b cosθ)`.
pub fn apply_beamsplitter<R: Real>(a: Cx<R>, b: Cx<R>, theta: R, phi: R) -> (Cx<R>, Cx<R>) {
    let (c, s) = (theta.cos(), theta.sin());
    let e = Cx::cis(phi);
    let a2 = a.scale(c) + (b * e).scale(s);
    let b2 = (b.scale(c)) - (a * e.conj()).scale(s);
    (a2, b2)
}

pub fn ln_factorial(k: u32) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// `P(k) = e^{−μ} μ^k / k!` for mean `μ = |α|²`.
pub fn photon_count_prob(amp: Complex64, k: u32) -> f64 {
    poisson_prob(amp.norm_sqr(), k)
}

pub fn poisson_prob(mean: f64, k: u32) -> f64 {
    if mean <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (k as f64 * mean.ln() - mean - ln_factorial(k)).exp()
}

/// Poisson probability as a differentiable function of the mean.
pub fn poisson_prob_r<R: Real>(mean: R, k: u32) -> R {
    let m = mean.val();
    let p = poisson_prob(m, k);
    // d/dμ [e^{-μ} μ^k / k!] = P(k) (k/μ − 1); at μ = 0 only k ≤ 1 is nonzero.
    let d = if m > 0.0 {
        p * (k as f64 / m - 1.0)
    } else {
        match k {
            0 => -1.0,
            1 => 1.0,
            _ => 0.0,
        }
    };
    R::node(p, &[(mean, d)])
}

/// Inversion sampling of a Poisson count.
pub fn sample_poisson(mean: f64, rng: &mut Rng) -> u32 {
    poisson_from_uniform(mean, rng.random::<f64>())
}

pub fn poisson_from_uniform(mean: f64, u: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u >= cdf && 1.0 - cdf > POISSON_TAIL {
        k += 1;
        p *= mean / k as f64;
        cdf += p;
        if p == 0.0 && k as f64 > mean {
            break;
        }
    }
    k
}

/// Class of a count relative to the expected photon number `round(α²)`.
pub fn qml_coarse_grain(k: u32, alpha_scale: f64) -> u8 {
    let r = (alpha_scale * alpha_scale).round() as i64;
    let k = k as i64;
    if k < r {
        0
    } else if k == r {
        1
    } else {
        2
    }
}

/// One Dolinar-receiver step for both sign hypotheses.
#[derive(Clone, Copy, Debug)]
pub struct DolinarStep<R> {
    /// Poisson mean at the counted port under `s = +` and `s = −`.
    pub measured_mean: [R; 2],
    /// Signal amplitude coefficients (in units of `α`) after the step.
    pub next_signal: [R; 2],
}

/// Mixes the signal, with amplitude `α·g_s` under hypothesis `s`, with a
/// reference copy `|α⟩` at angle `θ − π·(n_phot mod 2)` and counts the
/// reference port.
pub fn dolinar_step<R: Real>(alpha: R, signal: [R; 2], theta: R, n_phot: u32) -> DolinarStep<R> {
    let th = theta - std::f64::consts::PI * (n_phot % 2) as f64;
    let (c, s) = (th.cos(), th.sin());
    let a2 = alpha * alpha;
    let mut measured_mean = [R::zero(); 2];
    let mut next_signal = [R::zero(); 2];
    for h in 0..2 {
        let m = c - signal[h] * s;
        measured_mean[h] = a2 * m * m;
        next_signal[h] = signal[h] * c + s;
    }
    DolinarStep { measured_mean, next_signal }
}

/// The balanced four-mode quarter.
pub fn quarter() -> [[Complex64; 4]; 4] {
    let o = Complex64::new(0.5, 0.0);
    let i = Complex64::new(0.0, 0.5);
    [[o, i, i, -o], [i, -o, o, i], [i, o, -o, i], [-o, i, i, o]]
}

fn apply4(m: &[[Complex64; 4]; 4], v: &[Complex64; 4]) -> [Complex64; 4] {
    let mut out = [Complex64::new(0.0, 0.0); 4];
    for r in 0..4 {
        for c in 0..4 {
            out[r] += m[r][c] * v[c];
        }
    }
    out
}

/// Opening quarter followed by the phase shifts `e^{−iφ_j}` on modes 0–2.
pub fn encode_multiphase(input: &[Complex64; 4], phases: [f64; 3]) -> [Complex64; 4] {
    let mut out = apply4(&quarter(), input);
    for j in 0..3 {
        out[j] *= Complex64::from_polar(1.0, -phases[j]);
    }
    out
}

/// Phases `(φ0, φ1, φ2) ∈ {0, 1}³` of hypothesis `h = φ0 + 2φ1 + 4φ2`.
pub fn multiphase_hypothesis(h: usize) -> [f64; 3] {
    [(h & 1) as f64, ((h >> 1) & 1) as f64, ((h >> 2) & 1) as f64]
}

/// Detector means after the control phases `e^{−ic_j}` and the closing quarter.
pub fn multiphase_means<R: Real>(encoded: &[Complex64; 4], controls: [R; 3]) -> [R; 4] {
    let mut shifted: [Cx<R>; 4] = [Cx::zero(); 4];
    for j in 0..4 {
        let z = Cx::from_c64(encoded[j]);
        shifted[j] = if j < 3 { z * Cx::cis(-controls[j]) } else { z };
    }
    let q = quarter();
    let mut means = [R::zero(); 4];
    for r in 0..4 {
        let mut acc = Cx::zero();
        for c in 0..4 {
            acc = acc + shifted[c].mul_c(q[r][c]);
        }
        means[r] = acc.norm_sqr();
    }
    means
}

/// Joint likelihood of four counts: the product of per-mode Poisson terms.
pub fn multiphase_likelihood<R: Real>(encoded: &[Complex64; 4], controls: [R; 3], counts: &[u32; 4]) -> R {
    let means = multiphase_means(encoded, controls);
    let mut p = R::one();
    for j in 0..4 {
        p = p * poisson_prob_r(means[j], counts[j]);
    }
    p
}

/// Samples the four counts and returns them with their joint log-likelihood.
pub fn multiphase_measure(encoded: &[Complex64; 4], controls: [f64; 3], rng: &mut Rng) -> ([u32; 4], f64) {
    let means = multiphase_means::<f64>(encoded, controls);
    let mut counts = [0u32; 4];
    let mut logl = 0.0;
    for j in 0..4 {
        counts[j] = sample_poisson(means[j], rng);
        logl += poisson_prob(means[j], counts[j]).max(1e-300).ln();
    }
    (counts, logl)
}

/// Trainable passive network `U = exp(i(A + A†))` on `d + 1` modes.
#[derive(Clone, Debug, PartialEq)]
pub struct BsNetwork {
    pub generator: DMatrix<Complex64>,
}

impl BsNetwork {
    pub fn new(generator: DMatrix<Complex64>) -> Self {
        assert!(generator.is_square());
        BsNetwork { generator }
    }

    pub fn zeros(modes: usize) -> Self {
        BsNetwork { generator: DMatrix::zeros(modes, modes) }
    }

    pub fn modes(&self) -> usize {
        self.generator.nrows()
    }

    fn hermitian(&self) -> DMatrix<Complex64> {
        &self.generator + self.generator.adjoint()
    }

    pub fn unitary(&self) -> DMatrix<Complex64> {
        let eig = SymmetricEigen::new(self.hermitian());
        let v = &eig.eigenvectors;
        let n = self.modes();
        let mut d = DMatrix::zeros(n, n);
        for k in 0..n {
            d[(k, k)] = Complex64::from_polar(1.0, eig.eigenvalues[k]);
        }
        v * d * v.adjoint()
    }

    /// The real `2n × 2n` matrix `[[Re U, Im U], [−Im U, Re U]]`.
    pub fn symplectic(&self) -> DMatrix<f64> {
        let u = self.unitary();
        let n = self.modes();
        let mut s = DMatrix::zeros(2 * n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                s[(r, c)] = u[(r, c)].re;
                s[(r, c + n)] = u[(r, c)].im;
                s[(r + n, c)] = -u[(r, c)].im;
                s[(r + n, c + n)] = u[(r, c)].re;
            }
        }
        s
    }

    pub fn apply(&self, reg: &CoherentRegister<f64>) -> Result<CoherentRegister<f64>, PhotonicError> {
        if reg.modes() != self.modes() {
            return Err(PhotonicError::Shape { expected: self.modes(), got: reg.modes() });
        }
        let u = self.unitary();
        let v = nalgebra::DVector::from_vec(reg.values());
        let out = u * v;
        Ok(CoherentRegister::from_c64(out.as_slice()))
    }

    pub fn counts(&self, reg: &CoherentRegister<f64>, rng: &mut Rng) -> Result<Vec<u32>, PhotonicError> {
        let out = self.apply(reg)?;
        Ok(out.means().into_iter().map(|m| sample_poisson(m, rng)).collect())
    }

    /// Pulls back a cotangent on `U` to the generator.
    ///
    /// `gbar` holds `∂L/∂Re U + i ∂L/∂Im U`; the result holds
    /// `∂L/∂Re A + i ∂L/∂Im A`. Uses the divided-difference form of the
    /// derivative of the matrix exponential in the eigenbasis of `A + A†`.
    pub fn unitary_vjp(&self, gbar: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let eig = SymmetricEigen::new(self.hermitian());
        let v = &eig.eigenvectors;
        let lam = &eig.eigenvalues;
        let n = self.modes();
        let gt = v.adjoint() * gbar * v;
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..n {
                let ej = Complex64::from_polar(1.0, lam[j]);
                let f = if (lam[j] - lam[k]).abs() < 1e-9 {
                    ej
                } else {
                    let ek = Complex64::from_polar(1.0, lam[k]);
                    (ej - ek) / Complex64::new(0.0, lam[j] - lam[k])
                };
                m[(j, k)] = f.conj() * gt[(j, k)];
            }
        }
        let k = v * m * v.adjoint();
        let gh = k * Complex64::new(0.0, -1.0);
        &gh + gh.adjoint()
    }
}

/// `U·v` for a differentiable unitary stored row-major.
pub fn apply_unitary_r<R: Real>(u: &[Cx<R>], v: &[Complex64]) -> Vec<Cx<R>> {
    let n = v.len();
    (0..n)
        .map(|r| {
            let mut acc = Cx::zero();
            for c in 0..n {
                acc = acc + u[r * n + c].mul_c(v[c]);
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn beamsplitter_examples() {
        let a = Cx::<f64>::from_c64(c(0.3, 0.1));
        let b = Cx::<f64>::from_c64(c(-0.2, 0.7));
        let (a2, b2) = apply_beamsplitter(a, b, 0.0, 1.3);
        assert!((a2.value() - a.value()).norm() < 1e-15 && (b2.value() - b.value()).norm() < 1e-15);
        let (a2, b2) = apply_beamsplitter(a, b, std::f64::consts::FRAC_PI_2, 0.0);
        assert!((a2.value() - b.value()).norm() < 1e-15);
        assert!((b2.value() + a.value()).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn beamsplitter_conserves_energy(ar in -2.0f64..2.0, ai in -2.0f64..2.0, br in -2.0f64..2.0, bi in -2.0f64..2.0, th in -7.0f64..7.0, ph in -7.0f64..7.0) {
            let (a2, b2) = apply_beamsplitter(Cx::new(ar, ai), Cx::new(br, bi), th, ph);
            let before = ar * ar + ai * ai + br * br + bi * bi;
            prop_assert!((a2.norm_sqr() + b2.norm_sqr() - before).abs() < 1e-12);
        }

        #[test]
        fn quarter_conserves_energy(v in prop::collection::vec(-2.0f64..2.0, 8), p in prop::collection::vec(0.0f64..6.3, 3)) {
            let input = [c(v[0], v[1]), c(v[2], v[3]), c(v[4], v[5]), c(v[6], v[7])];
            let out = encode_multiphase(&input, [p[0], p[1], p[2]]);
            let e0: f64 = input.iter().map(|z| z.norm_sqr()).sum();
            let e1: f64 = out.iter().map(|z| z.norm_sqr()).sum();
            prop_assert!((e0 - e1).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_examples() {
        assert_eq!(photon_count_prob(c(0.0, 0.0), 0), 1.0);
        assert!((photon_count_prob(c(1.0, 0.0), 0) - 0.367879).abs() < 1e-6);
        for m in [0.5, 1.0, 2.5, 4.0] {
            let s: f64 = (0..=50).map(|k| poisson_prob(m, k)).sum();
            assert!((1.0 - s).abs() < 1e-12);
        }
        assert_eq!(poisson_from_uniform(0.0, 0.99), 0);
        let mut rng = stream(5, &[]);
        let mean: f64 = (0..100_000).map(|_| sample_poisson(2.0, &mut rng) as f64).sum::<f64>() / 1e5;
        assert!((mean - 2.0).abs() < 0.02);
    }

    #[test]
    fn coarse_grain_examples() {
        assert_eq!(qml_coarse_grain(1, 1.0), 1);
        assert_eq!(qml_coarse_grain(0, 1.0), 0);
        assert_eq!(qml_coarse_grain(5, 0.75), 2);
    }

    #[test]
    fn dolinar_examples() {
        let alpha = 0.5;
        // θ = π/4 nulls the counted port under s = +.
        let st = dolinar_step(alpha, [1.0, -1.0], std::f64::consts::FRAC_PI_4, 0);
        assert!(st.measured_mean[0].abs() < 1e-15);
        assert!(poisson_prob(st.measured_mean[0], 1) < 1e-15);
        let st = dolinar_step(0.0, [1.0, -1.0], 0.3, 0);
        assert_eq!(st.measured_mean, [0.0, 0.0]);

        // Direct 2×2 beam-splitter algebra at θ = π/4.
        let th = std::f64::consts::FRAC_PI_4;
        let st = dolinar_step(alpha, [1.0, -1.0], th, 0);
        for (h, s) in [1.0, -1.0].iter().enumerate() {
            let (a2, b2) = apply_beamsplitter(Cx::real(s * alpha), Cx::real(alpha), th, 0.0);
            assert!((st.measured_mean[h] - b2.norm_sqr()).abs() < 1e-15);
            assert!((st.next_signal[h] * alpha - a2.re).abs() < 1e-15);
        }
        // An odd photon count flips the effective angle by π.
        let odd = dolinar_step(alpha, [1.0, -1.0], th, 3);
        let even = dolinar_step(alpha, [1.0, -1.0], th - std::f64::consts::PI, 0);
        assert!((odd.measured_mean[1] - even.measured_mean[1]).abs() < 1e-15);
    }

    #[test]
    fn quarter_is_unitary() {
        let q = quarter();
        for r in 0..4 {
            for s in 0..4 {
                let dot: Complex64 = (0..4).map(|k| q[k][r].conj() * q[k][s]).sum();
                let want = if r == s { 1.0 } else { 0.0 };
                assert!((dot - c(want, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn vacuum_gives_no_clicks() {
        let enc = encode_multiphase(&[c(0.0, 0.0); 4], [1.0, 0.0, 1.0]);
        let mut rng = stream(0, &[]);
        for _ in 0..100 {
            assert_eq!(multiphase_measure(&enc, [0.4, 1.0, 2.0], &mut rng).0, [0, 0, 0, 0]);
        }
    }

    #[test]
    fn matched_controls_leave_quarter_squared() {
        let input = [c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        let phases = [1.0, 0.0, 1.0];
        let enc = encode_multiphase(&input, phases);
        let controls = phases.map(|p: f64| (std::f64::consts::TAU - p) % std::f64::consts::TAU);
        let means = multiphase_means::<f64>(&enc, controls);
        let q = quarter();
        let q2 = apply4(&q, &apply4(&q, &input));
        for j in 0..4 {
            assert!((means[j] - q2[j].norm_sqr()).abs() < 1e-12);
        }
    }

    #[test]
    fn network_examples() {
        let id = BsNetwork::zeros(3).unitary();
        assert!((id - DMatrix::<Complex64>::identity(3, 3)).norm() < 1e-14);
        let mut rng = stream(4, &[]);
        let a = DMatrix::from_fn(4, 4, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let net = BsNetwork::new(a);
        let u = net.unitary();
        assert!((u.adjoint() * &u - DMatrix::<Complex64>::identity(4, 4)).norm() < 1e-10);
        let reg = CoherentRegister::<f64>::from_c64(&[c(0.4, 0.1), c(-0.3, 0.0), c(0.0, 0.9), c(0.2, -0.2)]);
        let out = net.apply(&reg).unwrap();
        assert!((out.total_photons() - reg.total_photons()).abs() < 1e-10);
        let s = net.symplectic();
        assert!((s.transpose() * &s - DMatrix::<f64>::identity(8, 8)).norm() < 1e-10);
        assert!(net.apply(&CoherentRegister::from_c64(&[c(1.0, 0.0)])).is_err());
    }

    #[test]
    fn unitary_vjp_matches_finite_differences() {
        let mut rng = stream(8, &[]);
        let n = 3;
        let a = DMatrix::from_fn(n, n, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let g = DMatrix::from_fn(n, n, |_, _| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let loss = |a: &DMatrix<Complex64>| -> f64 {
            let u = BsNetwork::new(a.clone()).unitary();
            u.iter().zip(g.iter()).map(|(u, g)| u.re * g.re + u.im * g.im).sum()
        };
        let grad = BsNetwork::new(a.clone()).unitary_vjp(&g);
        let h = 1e-6;
        for r in 0..n {
            for cidx in 0..n {
                for (dir, comp) in [(c(h, 0.0), 0), (c(0.0, h), 1)] {
                    let mut ap = a.clone();
                    ap[(r, cidx)] += dir;
                    let mut am = a.clone();
                    am[(r, cidx)] -= dir;
                    let fd = (loss(&ap) - loss(&am)) / (2.0 * h);
                    let an = if comp == 0 { grad[(r, cidx)].re } else { grad[(r, cidx)].im };
                    assert!((fd - an).abs() < 1e-7, "({r},{cidx},{comp}) {fd} vs {an}");
                }
            }
        }
    }
}
