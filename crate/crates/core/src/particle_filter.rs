//! Weighted particle approximation of a Bayesian posterior.
//!
//! Particle positions are plain `f64` and never carry derivatives; only the
//! weights are generic over [`Real`], which is what the gradient estimator
//! differentiates through.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("invalid parameter space: {0}")]
    InvalidSpace(String),
    #[error("support predicate accepted {accepted} of {drawn} prior draws")]
    UnsatisfiableSupport { accepted: usize, drawn: usize },
    #[error("every particle has zero likelihood")]
    DegenerateEvidence,
    #[error("an ensemble needs at least two particles, got {0}")]
    TooFewParticles(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dim {
    Continuous { name: String, lower: f64, upper: f64 },
    Discrete { name: String, cardinality: usize },
}

impl Dim {
    pub fn continuous(name: &str, lower: f64, upper: f64) -> Dim {
        Dim::Continuous { name: name.to_string(), lower, upper }
    }

    pub fn discrete(name: &str, cardinality: usize) -> Dim {
        Dim::Discrete { name: name.to_string(), cardinality }
    }

    pub fn name(&self) -> &str {
        match self {
            Dim::Continuous { name, .. } | Dim::Discrete { name, .. } => name,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, Dim::Continuous { .. })
    }
}

/// Joint constraint on a particle beyond its bounding box.
#[derive(Clone)]
pub enum Support {
    /// `θ[lo] < θ[hi]`.
    Ordered { lo: usize, hi: usize },
    Custom(Arc<dyn Fn(&[f64]) -> bool + Send + Sync>),
}

impl Support {
    pub fn accepts(&self, x: &[f64]) -> bool {
        match self {
            Support::Ordered { lo, hi } => x[*lo] < x[*hi],
            Support::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Support::Ordered { lo, hi } => write!(f, "Ordered({lo} < {hi})"),
            Support::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParameterSpace {
    pub dims: Vec<Dim>,
    pub support: Option<Support>,
}

impl ParameterSpace {
    pub fn new(dims: Vec<Dim>, support: Option<Support>) -> Result<Self, FilterError> {
        if dims.is_empty() {
            return Err(FilterError::InvalidSpace("no dimensions".into()));
        }
        for d in &dims {
            match d {
                Dim::Continuous { name, lower, upper } => {
                    if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
                        return Err(FilterError::InvalidSpace(format!("{name}: need finite lower < upper")));
                    }
                }
                Dim::Discrete { name, cardinality } => {
                    if *cardinality < 2 {
                        return Err(FilterError::InvalidSpace(format!("{name}: cardinality must be at least 2")));
                    }
                }
            }
        }
        if let Some(Support::Ordered { lo, hi }) = &support {
            if *lo >= dims.len() || *hi >= dims.len() || lo == hi {
                return Err(FilterError::InvalidSpace("ordering constraint refers to unknown dimensions".into()));
            }
        }
        Ok(ParameterSpace { dims, support })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn continuous_indices(&self) -> Vec<usize> {
        (0..self.dims.len()).filter(|&i| self.dims[i].is_continuous()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.dims.iter().map(|d| d.name().to_string()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name() == name)
    }

    /// Bounds of dimension `i` (`[0, cardinality)` for discrete ones).
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        match &self.dims[i] {
            Dim::Continuous { lower, upper, .. } => (*lower, *upper),
            Dim::Discrete { cardinality, .. } => (0.0, *cardinality as f64),
        }
    }

    pub fn accepts(&self, x: &[f64]) -> bool {
        self.support.as_ref().is_none_or(|s| s.accepts(x))
    }

    /// Number of points of a purely discrete space, `None` otherwise.
    pub fn enumerable(&self) -> Option<usize> {
        self.dims.iter().try_fold(1usize, |acc, d| match d {
            Dim::Discrete { cardinality, .. } => Some(acc * cardinality),
            Dim::Continuous { .. } => None,
        })
    }

    /// Maps a point of the unit cube to the bounding box.
    fn from_unit(&self, u: &[f64], out: &mut [f64]) {
        for (i, d) in self.dims.iter().enumerate() {
            out[i] = match d {
                Dim::Continuous { lower, upper, .. } => lower + (upper - lower) * u[i],
                Dim::Discrete { cardinality, .. } => ((u[i] * *cardinality as f64).floor()).min(*cardinality as f64 - 1.0),
            };
        }
    }

    /// Draws one point uniformly over the support by rejection.
    pub fn sample_uniform(&self, rng: &mut Rng) -> Result<Vec<f64>, FilterError> {
        let mut u = vec![0.0; self.dim()];
        let mut x = vec![0.0; self.dim()];
        let mut drawn = 0usize;
        loop {
            for v in u.iter_mut() {
                *v = rng.random::<f64>();
            }
            self.from_unit(&u, &mut x);
            drawn += 1;
            if self.accepts(&x) {
                return Ok(x);
            }
            if drawn >= MAX_REJECTION_DRAWS {
                return Err(FilterError::UnsatisfiableSupport { accepted: 0, drawn });
            }
        }
    }
}

const MAX_REJECTION_DRAWS: usize = 1_000_000;
const MIN_ACCEPTANCE: f64 = 1e-4;

/// Mean, covariance and correlation of the continuous dimensions.
#[derive(Clone, Debug)]
pub struct PosteriorMoments<R> {
    pub mean: Vec<R>,
    /// Row-major `d × d`.
    pub covariance: Vec<R>,
    pub correlation: Vec<R>,
}

impl<R: Real> PosteriorMoments<R> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov(&self, i: usize, j: usize) -> R {
        self.covariance[i * self.mean.len() + j]
    }

    pub fn trace(&self) -> R {
        let d = self.mean.len();
        let diag: Vec<R> = (0..d).map(|i| self.cov(i, i)).collect();
        R::sum(&diag)
    }

    pub fn values(&self) -> PosteriorMoments<f64> {
        PosteriorMoments {
            mean: self.mean.iter().map(|x| x.val()).collect(),
            covariance: self.covariance.iter().map(|x| x.val()).collect(),
            correlation: self.correlation.iter().map(|x| x.val()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParticleEnsemble<R = f64> {
    space: Arc<ParameterSpace>,
    /// Row-major `N × dim`.
    particles: Vec<f64>,
    weights: Vec<R>,
    pub ess_threshold: f64,
    pub jitter_scale: f64,
    pub resampling_gradient: ResamplingGradient,
}

/// Result of one systematic resampling pass.
#[derive(Clone, Debug)]
pub struct Resampled<R> {
    /// Surviving particle indices, in output order.
    pub indices: Vec<usize>,
    /// Log-probability of this index configuration under the weights.
    pub log_prob: R,
}

/// How a resampling pass exposes the dependence of the drawn indices on the
/// weights to the gradient estimator. Particle positions never carry
/// derivatives in either case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingGradient {
    /// Each survivor of index `a` gets the weight `w_a / ⊥(w_a) / N`: the
    /// value is uniform, and the score `∇ ln w_a` of its own draw reaches
    /// every later quantity computed from the weights.
    #[default]
    PerIndex,
    /// Weights are reset to constants and the log-probability of the whole
    /// systematic configuration is handed to the estimator as one score
    /// term, weighted by the episode's future loss.
    Configuration,
}

pub const DEFAULT_ESS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_JITTER_SCALE: f64 = 0.01;

impl ParticleEnsemble<f64> {
    /// Draws `n` equal-weight particles from the uniform prior.
    ///
    /// Continuous and discrete coordinates are Latin-hypercube stratified;
    /// points rejected by the support predicate are redrawn uniformly. A
    /// purely discrete space with exactly as many particles as points is
    /// enumerated.
    pub fn init_from_prior(space: Arc<ParameterSpace>, n: usize, rng: &mut Rng) -> Result<Self, FilterError> {
        if n < 2 && space.enumerable() != Some(n) {
            return Err(FilterError::TooFewParticles(n));
        }
        let d = space.dim();
        let mut particles = vec![0.0; n * d];
        if space.enumerable() == Some(n) {
            for i in 0..n {
                let mut rest = i;
                for (j, dim) in space.dims.iter().enumerate().rev() {
                    if let Dim::Discrete { cardinality, .. } = dim {
                        particles[i * d + j] = (rest % cardinality) as f64;
                        rest /= cardinality;
                    }
                }
            }
        } else {
            // The first coordinate keeps its strata in order, so particles start
            // sorted along it and order-preserving resampling keeps them close
            // to sorted. The other coordinates are paired at random.
            let mut strata: Vec<Vec<usize>> = Vec::with_capacity(d);
            for j in 0..d {
                let mut p: Vec<usize> = (0..n).collect();
                if j > 0 {
                    for i in (1..n).rev() {
                        let k = rng.random_range(0..=i);
                        p.swap(i, k);
                    }
                }
                strata.push(p);
            }
            let mut u = vec![0.0; d];
            let mut drawn = n;
            let mut accepted = 0usize;
            for i in 0..n {
                for j in 0..d {
                    u[j] = (strata[j][i] as f64 + rng.random::<f64>()) / n as f64;
                }
                let row = &mut particles[i * d..(i + 1) * d];
                space.from_unit(&u, row);
                if space.accepts(row) {
                    accepted += 1;
                    continue;
                }
                loop {
                    for v in u.iter_mut() {
                        *v = rng.random::<f64>();
                    }
                    space.from_unit(&u, row);
                    drawn += 1;
                    if space.accepts(row) {
                        accepted += 1;
                        break;
                    }
                    if drawn >= MAX_REJECTION_DRAWS && (accepted as f64) < MIN_ACCEPTANCE * drawn as f64 {
                        return Err(FilterError::UnsatisfiableSupport { accepted, drawn });
                    }
                }
            }
        }
        Ok(ParticleEnsemble {
            space,
            particles,
            weights: vec![1.0 / n as f64; n],
            ess_threshold: DEFAULT_ESS_THRESHOLD,
            jitter_scale: DEFAULT_JITTER_SCALE,
            resampling_gradient: ResamplingGradient::default(),
        })
    }

    pub fn from_particles(space: Arc<ParameterSpace>, particles: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(particles.len(), weights.len() * space.dim());
        ParticleEnsemble {
            space,
            particles,
            weights,
            ess_threshold: DEFAULT_ESS_THRESHOLD,
            jitter_scale: DEFAULT_JITTER_SCALE,
            resampling_gradient: ResamplingGradient::default(),
        }
    }
}

impl<R: Real> ParticleEnsemble<R> {
    /// The same particles with weights lifted into another scalar type.
    pub fn lift<S: Real>(&self) -> ParticleEnsemble<S> {
        ParticleEnsemble {
            space: self.space.clone(),
            particles: self.particles.clone(),
            weights: self.weights.iter().map(|w| S::cst(w.val())).collect(),
            ess_threshold: self.ess_threshold,
            jitter_scale: self.jitter_scale,
            resampling_gradient: self.resampling_gradient,
        }
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        let d = self.space.dim();
        &self.particles[i * d..(i + 1) * d]
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn weights(&self) -> &[R] {
        &self.weights
    }

    pub fn weight_values(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.val()).collect()
    }

    /// Multiplies each weight by its particle's likelihood and renormalizes.
    pub fn bayes_update(&mut self, likelihood: &[R]) -> Result<(), FilterError> {
        assert_eq!(likelihood.len(), self.len());
        self.weights = R::reweight(&self.weights, likelihood).ok_or(FilterError::DegenerateEvidence)?;
        Ok(())
    }

    /// Convenience form of [`Self::bayes_update`] taking a closure.
    pub fn bayes_update_with(&mut self, mut f: impl FnMut(&[f64]) -> R) -> Result<(), FilterError> {
        let lik: Vec<R> = (0..self.len()).map(|i| f(self.particle(i))).collect();
        self.bayes_update(&lik)
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w.val() * w.val()).sum::<f64>()
    }

    /// Weighted moments of the continuous dimensions.
    pub fn moments(&self) -> PosteriorMoments<R> {
        self.moments_of(&self.weights, &self.space.continuous_indices())
    }

    /// Moments of the continuous dimensions restricted to the particles with
    /// `dims[disc] == value`, together with that branch's total weight.
    pub fn conditional_moments(&self, disc: usize, value: usize) -> (R, PosteriorMoments<R>) {
        let mask: Vec<f64> =
            (0..self.len()).map(|i| if self.particle(i)[disc] as usize == value { 1.0 } else { 0.0 }).collect();
        let mass = R::dot(&self.weights, &mask);
        let dims = self.space.continuous_indices();
        if mass.val() <= 0.0 {
            let d = dims.len();
            let zero = vec![R::zero(); d];
            let mut corr = vec![R::zero(); d * d];
            for i in 0..d {
                corr[i * d + i] = R::one();
            }
            return (mass, PosteriorMoments { mean: zero, covariance: vec![R::zero(); d * d], correlation: corr });
        }
        let w: Vec<R> = self.weights.iter().zip(&mask).map(|(w, m)| if *m > 0.0 { *w / mass } else { R::zero() }).collect();
        (mass, self.moments_of(&w, &dims))
    }

    fn moments_of(&self, w: &[R], dims: &[usize]) -> PosteriorMoments<R> {
        let n = self.len();
        let d = dims.len();
        let dimn = self.space.dim();
        let mut col = vec![0.0; n];
        let mut mean = Vec::with_capacity(d);
        let mut mv = Vec::with_capacity(d);
        for &j in dims {
            for i in 0..n {
                col[i] = self.particles[i * dimn + j];
            }
            let m = R::dot(w, &col);
            mv.push(m.val());
            mean.push(m);
        }
        // Centred second moments. The derivative with respect to the mean
        // vanishes because the weights are normalized, so each entry is a
        // linear form in the weights.
        let mut covariance = vec![R::zero(); d * d];
        for a in 0..d {
            for b in a..d {
                for i in 0..n {
                    col[i] = (self.particles[i * dimn + dims[a]] - mv[a]) * (self.particles[i * dimn + dims[b]] - mv[b]);
                }
                let c = R::dot(w, &col);
                let c = if c.val() < 0.0 { R::zero() } else { c };
                covariance[a * d + b] = c;
                covariance[b * d + a] = c;
            }
        }
        let mut correlation = vec![R::zero(); d * d];
        for a in 0..d {
            for b in 0..d {
                correlation[a * d + b] = if a == b {
                    R::one()
                } else {
                    let va = covariance[a * d + a];
                    let vb = covariance[b * d + b];
                    if va.val() > 0.0 && vb.val() > 0.0 {
                        let r = covariance[a * d + b] / (va * vb).sqrt();
                        if r.val() > 1.0 {
                            R::one()
                        } else if r.val() < -1.0 {
                            -R::one()
                        } else {
                            r
                        }
                    } else {
                        R::zero()
                    }
                };
            }
        }
        PosteriorMoments { mean, covariance, correlation }
    }

    /// Total weight per value of a discrete dimension.
    pub fn discrete_marginal(&self, disc: usize) -> Vec<R> {
        let card = match &self.space.dims[disc] {
            Dim::Discrete { cardinality, .. } => *cardinality,
            Dim::Continuous { .. } => panic!("dimension {disc} is continuous"),
        };
        (0..card)
            .map(|v| {
                let mask: Vec<f64> =
                    (0..self.len()).map(|i| if self.particle(i)[disc] as usize == v { 1.0 } else { 0.0 }).collect();
                R::dot(&self.weights, &mask)
            })
            .collect()
    }

    /// Index drawn with probability equal to its weight.
    pub fn draw_index(&self, rng: &mut Rng) -> usize {
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w.val();
            if u < acc {
                return i;
            }
        }
        self.weights.iter().rposition(|w| w.val() > 0.0).unwrap_or(self.len() - 1)
    }

    pub fn needs_resampling(&self) -> bool {
        self.effective_sample_size() < self.ess_threshold * self.len() as f64
    }

    /// Systematic resampling followed by support-clipped Gaussian jitter.
    ///
    /// The returned log-probability is that of the drawn index
    /// configuration: systematic resampling with offset `u ∈ [0, 1/N)`
    /// produces a given configuration for a sub-interval of offsets whose
    /// length is a piecewise-linear function of the cumulative weights.
    pub fn resample(&mut self, rng: &mut Rng) -> Resampled<R> {
        let n = self.len();
        let nf = n as f64;
        let wv = self.weight_values();
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for w in &wv {
            acc += w;
            cum.push(acc);
        }
        let total = acc;
        let u0 = rng.random::<f64>() / nf;
        let mut indices = Vec::with_capacity(n);
        let mut k = 0usize;
        for j in 0..n {
            let u = (u0 + j as f64 / nf) * total;
            while k < n - 1 && cum[k] <= u {
                k += 1;
            }
            indices.push(k);
        }

        // Interval of offsets reproducing `indices`: cum[a_j - 1] <= u0 + j/N < cum[a_j].
        let (mut lo, mut lo_arg) = (0.0, None);
        let (mut hi, mut hi_arg) = (1.0 / nf, None);
        for (j, &a) in indices.iter().enumerate() {
            let shift = j as f64 / nf;
            if a > 0 {
                let l = cum[a - 1] / total - shift;
                if l > lo {
                    lo = l;
                    lo_arg = Some((a - 1, shift));
                }
            }
            let h = cum[a] / total - shift;
            if h < hi {
                hi = h;
                hi_arg = Some((a, shift));
            }
        }
        let partial = |arg: Option<(usize, f64)>, fallback: f64| -> R {
            match arg {
                Some((upto, shift)) => {
                    let ones = vec![1.0; upto + 1];
                    R::dot(&self.weights[..=upto], &ones) - shift
                }
                None => R::cst(fallback),
            }
        };
        let width = partial(hi_arg, 1.0 / nf) - partial(lo_arg, 0.0);
        let log_prob = if width.val() > 0.0 { (width * nf).ln() } else { R::cst((f64::MIN_POSITIVE).ln()) };

        let d = self.space.dim();
        let cont = self.space.continuous_indices();
        let sd: Vec<f64> = {
            let m = self.moments().values();
            (0..cont.len()).map(|a| m.cov(a, a).max(0.0).sqrt() * self.jitter_scale).collect()
        };
        let mut next = vec![0.0; n * d];
        let mut cand = vec![0.0; d];
        for (j, &a) in indices.iter().enumerate() {
            let src = &self.particles[a * d..(a + 1) * d];
            cand.copy_from_slice(src);
            for (c, &dim) in cont.iter().enumerate() {
                if sd[c] > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    let (lo, hi) = self.space.bounds(dim);
                    cand[dim] = (cand[dim] + sd[c] * z).clamp(lo, hi);
                }
            }
            let row = &mut next[j * d..(j + 1) * d];
            if self.space.accepts(&cand) {
                row.copy_from_slice(&cand);
            } else {
                row.copy_from_slice(src);
            }
        }
        self.particles = next;
        self.weights = match self.resampling_gradient {
            ResamplingGradient::Configuration => vec![R::cst(1.0 / nf); n],
            ResamplingGradient::PerIndex => indices
                .iter()
                .map(|&a| {
                    let w = self.weights[a];
                    if w.val() > 0.0 {
                        w * (1.0 / (w.val() * nf))
                    } else {
                        R::cst(1.0 / nf)
                    }
                })
                .collect(),
        };
        Resampled { indices, log_prob }
    }

    /// Writes `particle_index,weight,<dims>` rows.
    pub fn write_snapshot<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["particle_index".to_string(), "weight".to_string()];
        header.extend(self.space.names());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string(), self.weights[i].val().to_string()];
            rec.extend(self.particle(i).iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn line() -> Arc<ParameterSpace> {
        Arc::new(ParameterSpace::new(vec![Dim::continuous("omega", 0.0, 1.0)], None).unwrap())
    }

    fn ens(xs: &[f64], w: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::from_particles(line(), xs.to_vec(), w.to_vec())
    }

    #[test]
    fn prior_particles_lie_in_support() {
        let mut rng = stream(1, &[]);
        let e = ParticleEnsemble::init_from_prior(line(), 480, &mut rng).unwrap();
        assert_eq!(e.len(), 480);
        assert!(e.particles().iter().all(|&x| (0.0..1.0).contains(&x)));
        assert!(e.weights().iter().all(|&w| w == 1.0 / 480.0));

        let tri = Arc::new(
            ParameterSpace::new(
                vec![Dim::continuous("omega0", 0.0, 1.0), Dim::continuous("omega1", 0.0, 1.0)],
                Some(Support::Ordered { lo: 0, hi: 1 }),
            )
            .unwrap(),
        );
        let e = ParticleEnsemble::init_from_prior(tri, 1000, &mut rng).unwrap();
        assert!((0..e.len()).all(|i| e.particle(i)[0] < e.particle(i)[1]));
    }

    #[test]
    fn discrete_space_is_enumerated() {
        let s = Arc::new(ParameterSpace::new(vec![Dim::discrete("class", 3)], None).unwrap());
        let e = ParticleEnsemble::init_from_prior(s, 3, &mut stream(0, &[])).unwrap();
        assert_eq!(e.particles(), &[0.0, 1.0, 2.0]);
        assert!(e.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn unsatisfiable_support_is_reported() {
        let s = Arc::new(
            ParameterSpace::new(
                vec![Dim::continuous("a", 0.0, 1.0)],
                Some(Support::Custom(Arc::new(|x: &[f64]| x[0] > 2.0))),
            )
            .unwrap(),
        );
        let r = ParticleEnsemble::init_from_prior(s, 10, &mut stream(0, &[]));
        assert!(matches!(r, Err(FilterError::UnsatisfiableSupport { .. })));
    }

    #[test]
    fn invalid_spaces_are_rejected() {
        assert!(ParameterSpace::new(vec![Dim::continuous("a", 1.0, 1.0)], None).is_err());
        assert!(ParameterSpace::new(vec![Dim::discrete("s", 1)], None).is_err());
    }

    #[test]
    fn bayes_rule_examples() {
        let mut e = ens(&[0.1, 0.9], &[0.5, 0.5]);
        e.bayes_update(&[0.8, 0.2]).unwrap();
        assert!((e.weights()[0] - 0.8).abs() < 1e-15);
        e.bayes_update(&[0.7, 0.7]).unwrap();
        assert!((e.weights()[0] - 0.8).abs() < 1e-15);
        assert_eq!(e.bayes_update(&[0.0, 0.0]), Err(FilterError::DegenerateEvidence));
    }

    #[test]
    fn moment_examples() {
        let m = ens(&[0.2, 0.8], &[0.5, 0.5]).moments();
        assert!((m.mean[0] - 0.5).abs() < 1e-15);
        assert!((m.covariance[0] - 0.09).abs() < 1e-15);

        let single = ens(&[0.3, 0.3], &[1.0, 0.0]).moments();
        assert_eq!(single.covariance[0], 0.0);

        let s2 = Arc::new(
            ParameterSpace::new(vec![Dim::continuous("a", 0.0, 1.0), Dim::continuous("b", 0.0, 1.0)], None).unwrap(),
        );
        let e = ParticleEnsemble::from_particles(s2.clone(), vec![0.1, 0.1, 0.5, 0.5, 0.7, 0.7], vec![0.2, 0.3, 0.5]);
        let m = e.moments();
        assert!((m.correlation[1] - 1.0).abs() < 1e-12);
        let flat = ParticleEnsemble::from_particles(s2, vec![0.1, 0.4, 0.5, 0.4], vec![0.5, 0.5]);
        let m = flat.moments();
        assert_eq!(m.correlation, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ess_examples() {
        let e = ens(&vec![0.5; 480], &vec![1.0 / 480.0; 480]);
        assert!((e.effective_sample_size() - 480.0).abs() < 1e-9);
        let mut w = vec![0.0; 10];
        w[3] = 1.0;
        assert!((ens(&[0.5; 10], &w).effective_sample_size() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn systematic_resampling_matches_enumeration() {
        // With w = (0.9, 0.1) and N = 2 the offsets are u0 and u0 + 1/2 with
        // u0 in [0, 1/2): index 1 survives iff u0 + 1/2 >= 0.9.
        for seed in 0..200 {
            let mut rng = stream(seed, &[]);
            let u0 = {
                let mut probe = rng.clone();
                probe.random::<f64>() / 2.0
            };
            let mut e = ens(&[0.25, 0.75], &[0.9, 0.1]);
            let r = e.resample(&mut rng);
            let expected = if u0 + 0.5 >= 0.9 { vec![0, 1] } else { vec![0, 0] };
            assert_eq!(r.indices, expected);
            let p = if expected == vec![0, 1] { 0.2 } else { 0.8 };
            assert!((r.log_prob - f64::ln(p)).abs() < 1e-12, "{} vs {}", r.log_prob, p.ln());
        }
    }

    #[test]
    fn resampling_probabilities_sum_to_one() {
        let w = [0.05, 0.4, 0.15, 0.3, 0.1];
        let mut seen: std::collections::BTreeMap<Vec<usize>, f64> = Default::default();
        for seed in 0..2000 {
            let mut e = ens(&[0.1, 0.2, 0.3, 0.4, 0.5], &w);
            let r = e.resample(&mut stream(seed, &[9]));
            seen.insert(r.indices, r.log_prob.exp());
        }
        let total: f64 = seen.values().sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn per_index_weights_carry_the_draw_score() {
        use crate::autodiff::{Tape, Var};
        Tape::reset();
        let lam = Var::leaf(0.7);
        let xs = [0.1, 0.35, 0.6, 0.85];
        let mut e: ParticleEnsemble<Var> = ens(&xs, &[0.25; 4]).lift();
        let lik: Vec<Var> = xs.iter().map(|&x| (lam * x).exp()).collect();
        e.bayes_update(&lik).unwrap();
        let before: Vec<f64> = e.weight_values();
        let r = e.resample(&mut stream(4, &[]));
        let tape = Tape::take();
        let n = xs.len() as f64;
        // d ln w_a / dλ = x_a − Σ_i w_i x_i for exponential tilting.
        let mean: f64 = xs.iter().zip(&before).map(|(x, w)| x * w).sum();
        for (j, &a) in r.indices.iter().enumerate() {
            let w = e.weights()[j];
            assert!((w.value() - 1.0 / n).abs() < 1e-15);
            let adj = tape.backward(&[(w, 1.0)], None, &mut []);
            let got = adj[lam.index().unwrap()];
            assert!((got - (xs[a] - mean) / n).abs() < 1e-12, "{got}");
        }
    }

    #[test]
    fn configuration_mode_resets_weights_to_constants() {
        let mut e = ens(&[0.2, 0.4, 0.9], &[0.5, 0.3, 0.2]);
        e.resampling_gradient = ResamplingGradient::Configuration;
        e.resample(&mut stream(1, &[]));
        assert!(e.weights().iter().all(|&w| w == 1.0 / 3.0));
    }

    #[test]
    fn resampled_moments_stay_close() {
        let mut rng = stream(3, &[]);
        let mut e = ParticleEnsemble::init_from_prior(line(), 10_000, &mut rng).unwrap();
        e.bayes_update_with(|x| (-(x[0] - 0.4).powi(2) / (2.0 * 0.05f64.powi(2))).exp()).unwrap();
        let before = e.moments();
        e.resample(&mut rng);
        let after = e.moments();
        let sd = before.covariance[0].sqrt();
        assert!((after.mean[0] - before.mean[0]).abs() < 5.0 * sd / 100.0);
        assert!(e.particles().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn snapshot_has_header() {
        let mut buf = Vec::new();
        ens(&[0.2, 0.8], &[0.5, 0.5]).write_snapshot(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("particle_index,weight,omega\n0,0.5,0.2\n"));
    }

    #[test]
    fn discrete_marginal_sums_to_one() {
        let s = Arc::new(
            ParameterSpace::new(vec![Dim::continuous("alpha", 0.0, 1.0), Dim::discrete("sign", 2)], None).unwrap(),
        );
        let mut e = ParticleEnsemble::init_from_prior(s, 100, &mut stream(2, &[])).unwrap();
        e.bayes_update_with(|x| 0.2 + 0.6 * x[1] * x[0]).unwrap();
        let m = e.discrete_marginal(1);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn updates_compose(l1 in prop::collection::vec(0.01f64..1.0, 6), l2 in prop::collection::vec(0.01f64..1.0, 6)) {
            let xs = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
            let mut a = ens(&xs, &[1.0 / 6.0; 6]);
            a.bayes_update(&l1).unwrap();
            a.bayes_update(&l2).unwrap();
            let mut b = ens(&xs, &[1.0 / 6.0; 6]);
            let prod: Vec<f64> = l1.iter().zip(&l2).map(|(x, y)| x * y).collect();
            b.bayes_update(&prod).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn covariance_is_psd(xs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 5), ws in prop::collection::vec(0.01f64..1.0, 5)) {
            let s = Arc::new(ParameterSpace::new(vec![Dim::continuous("a", 0.0, 1.0), Dim::continuous("b", 0.0, 1.0)], None).unwrap());
            let z: f64 = ws.iter().sum();
            let flat: Vec<f64> = xs.iter().flat_map(|(a, b)| [*a, *b]).collect();
            let e = ParticleEnsemble::from_particles(s, flat, ws.iter().map(|w| w / z).collect());
            let m = e.moments();
            let (a, b, c) = (m.covariance[0], m.covariance[1], m.covariance[3]);
            prop_assert!(a >= -1e-10 && c >= -1e-10);
            prop_assert!(a * c - b * b >= -1e-10);
            prop_assert!(m.correlation.iter().all(|r| (-1.0..=1.0).contains(r)));
        }
    }
}
