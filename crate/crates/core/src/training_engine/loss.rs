//! Batch losses and the per-episode figures of merit they aggregate.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;

/// Floor applied to a vanishing batch-mean error inside the log loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// How per-step losses of a batch are combined into one scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `(1/(T·B)) Σ_t Σ_k ℓ_kt`.
    Cumulative,
    /// `(1/T) Σ_t ln((1/B) Σ_k ℓ_kt)`.
    Log,
    /// `(1/B) Σ_k ℓ_k,T−1`, the loss after the last step only.
    Terminal,
}

/// Value of a batch loss and its derivative with respect to each `ℓ_kt`.
///
/// The derivative does not depend on `k`, so one weight per step suffices.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub value: f64,
    pub step_weights: Vec<f64>,
    /// Steps whose batch-mean error hit [`LOSS_FLOOR`].
    pub clamped_steps: usize,
}

/// Aggregates a rectangular `B × T` table of per-step losses.
pub fn aggregate(mode: LossMode, losses: &[Vec<f64>]) -> Aggregate {
    let b = losses.len();
    let t_len = losses.first().map_or(0, Vec::len);
    if b == 0 || t_len == 0 {
        return Aggregate { value: 0.0, step_weights: vec![0.0; t_len], clamped_steps: 0 };
    }
    let bf = b as f64;
    let tf = t_len as f64;
    let means: Vec<f64> = (0..t_len).map(|t| losses.iter().map(|row| row[t]).sum::<f64>() / bf).collect();
    match mode {
        LossMode::Cumulative => Aggregate {
            value: means.iter().sum::<f64>() / tf,
            step_weights: vec![1.0 / (tf * bf); t_len],
            clamped_steps: 0,
        },
        LossMode::Log => {
            let mut clamped = 0;
            let mut value = 0.0;
            let mut w = Vec::with_capacity(t_len);
            for &m in &means {
                if m > LOSS_FLOOR {
                    value += m.ln();
                    w.push(1.0 / (tf * bf * m));
                } else {
                    clamped += 1;
                    value += LOSS_FLOOR.ln();
                    w.push(0.0);
                }
            }
            Aggregate { value: value / tf, step_weights: w, clamped_steps: clamped }
        }
        LossMode::Terminal => {
            let mut w = vec![0.0; t_len];
            w[t_len - 1] = 1.0 / bf;
            Aggregate { value: means[t_len - 1], step_weights: w, clamped_steps: 0 }
        }
    }
}

/// `(1/(Mmax·B)) Σ_t Σ_k ℓ/η` for losses already divided by `η`.
pub fn cumulative_loss(losses: &[Vec<f64>]) -> f64 {
    aggregate(LossMode::Cumulative, losses).value
}

pub fn log_loss(losses: &[Vec<f64>]) -> f64 {
    aggregate(LossMode::Log, losses).value
}

/// Which form of the prior width enters the normalization `η`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaForm {
    /// `Σ G_ii (b_i − a_i)/12`.
    Linear,
    /// `Σ G_ii (b_i − a_i)²/12`, the variance of the uniform prior.
    Variance,
}

/// The prior-width term of `η` for the given weights and prior boxes.
pub fn eta_prior_term(weights: &[f64], bounds: &[(f64, f64)], form: EtaForm) -> f64 {
    weights
        .iter()
        .zip(bounds)
        .map(|(g, &(a, b))| {
            let w = b - a;
            g * match form {
                EtaForm::Linear => w / 12.0,
                EtaForm::Variance => w * w / 12.0,
            }
        })
        .sum()
}

/// `η = min(prior_term, 1/T)`.
pub fn eta(prior_term: f64, elapsed: f64) -> f64 {
    prior_term.min(1.0 / elapsed)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in w.iter().enumerate().skip(1) {
        if x > w[best] {
            best = i;
        }
    }
    best
}

/// `1 − δ(argmax ŵ, truth)`.
pub fn classification_loss(weights: &[f64], truth: usize) -> f64 {
    if argmax_lowest(weights) == truth {
        0.0
    } else {
        1.0
    }
}

/// Sign of the signal in the Dolinar task; index 0 is `+`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn from_index(i: usize) -> Sign {
        if i == 0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    pub fn index(self) -> usize {
        match self {
            Sign::Plus => 0,
            Sign::Minus => 1,
        }
    }
}

/// Bayes guess: `+` when `p̂₊ > 0.5`.
pub fn bayes_guess(p_plus: f64) -> Sign {
    if p_plus > 0.5 {
        Sign::Plus
    } else {
        Sign::Minus
    }
}

/// Parity guess: `+` for an even photon count.
pub fn parity_guess(n_phot: u32) -> Sign {
    if n_phot.is_multiple_of(2) {
        Sign::Plus
    } else {
        Sign::Minus
    }
}

pub const DOLINAR_VARIANTS: u8 = 9;

/// Dolinar loss `variant ∈ 0..9`.
///
/// Variants 0–2 are the Bayes-guess error, `1 − p̂_s` and the parity-guess
/// error; 3–5 subtract `p_H` from them and 6–8 divide by it.
pub fn dolinar_loss<R: Real>(variant: u8, p_plus: R, truth: Sign, n_phot: u32, p_h: f64) -> R {
    let base = match variant % 3 {
        0 => R::cst(if bayes_guess(p_plus.val()) == truth { 0.0 } else { 1.0 }),
        1 => match truth {
            Sign::Plus => R::one() - p_plus,
            Sign::Minus => p_plus,
        },
        _ => R::cst(if parity_guess(n_phot) == truth { 0.0 } else { 1.0 }),
    };
    match variant / 3 {
        0 => base,
        1 => base - p_h,
        _ => base / p_h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cumulative_examples() {
        // B = 1, Mmax = 1, ℓ = 0.5, η = 0.25.
        assert_eq!(cumulative_loss(&[vec![0.5 / 0.25]]), 2.0);
        assert_eq!(cumulative_loss(&[vec![0.0, 0.0], vec![0.0, 0.0]]), 0.0);
        assert_eq!(eta(eta_prior_term(&[1.0], &[(0.0, 1.0)], EtaForm::Linear), 6.0), 1.0 / 12.0);
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_loss(&[vec![1.0, 1.0, 1.0]]), 0.0);
        let e = std::f64::consts::E;
        assert!((log_loss(&[vec![e, e * e]]) - 1.5).abs() < 1e-15);
        let agg = aggregate(LossMode::Log, &[vec![0.0, 1.0]]);
        assert_eq!(agg.clamped_steps, 1);
        assert_eq!(agg.step_weights[0], 0.0);
    }

    #[test]
    fn terminal_uses_last_step() {
        let agg = aggregate(LossMode::Terminal, &[vec![5.0, 1.0], vec![7.0, 0.0]]);
        assert_eq!(agg.value, 0.5);
        assert_eq!(agg.step_weights, vec![0.0, 0.5]);
    }

    #[test]
    fn step_weights_match_finite_differences() {
        let rows = vec![vec![0.3, 0.2, 0.05], vec![0.6, 0.1, 0.02]];
        for mode in [LossMode::Cumulative, LossMode::Log, LossMode::Terminal] {
            let agg = aggregate(mode, &rows);
            for t in 0..3 {
                let h = 1e-7;
                let mut up = rows.clone();
                up[1][t] += h;
                let mut dn = rows.clone();
                dn[1][t] -= h;
                let fd = (aggregate(mode, &up).value - aggregate(mode, &dn).value) / (2.0 * h);
                assert!((fd - agg.step_weights[t]).abs() < 1e-5 * (1.0 + fd.abs()), "{mode:?} t={t}");
            }
        }
    }

    #[test]
    fn dolinar_examples() {
        assert_eq!(dolinar_loss(0, 0.9, Sign::Plus, 0, 0.1), 0.0);
        assert!((dolinar_loss(1, 0.9, Sign::Minus, 0, 0.1) - 0.9).abs() < 1e-15);
        assert_eq!(dolinar_loss(2, 0.2, Sign::Plus, 4, 0.1), 0.0);
        assert!((dolinar_loss(3, 0.2, Sign::Plus, 0, 0.1) - 0.9).abs() < 1e-15);
        assert!((dolinar_loss(7, 0.2, Sign::Plus, 0, 0.1) - 8.0).abs() < 1e-12);
        assert!((dolinar_loss(8, 0.2, Sign::Plus, 3, 0.25) - 4.0).abs() < 1e-12);
        // p̂₊ = 0.5 guesses −.
        assert_eq!(dolinar_loss(0, 0.5, Sign::Minus, 0, 0.1), 0.0);
    }

    #[test]
    fn classification_ties_go_low() {
        assert_eq!(argmax_lowest(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(classification_loss(&[0.5, 0.5], 0), 0.0);
        assert_eq!(classification_loss(&[0.5, 0.5], 1), 1.0);
    }

    proptest! {
        #[test]
        fn permutation_and_duplication_invariance(
            rows in proptest::collection::vec(proptest::collection::vec(0.01f64..2.0, 4), 2..6),
            rot in 0usize..5,
        ) {
            let mut perm = rows.clone();
            let r = rot % perm.len();
            perm.rotate_left(r);
            let mut dup = rows.clone();
            dup.extend(rows.iter().cloned());
            for mode in [LossMode::Cumulative, LossMode::Log, LossMode::Terminal] {
                let a = aggregate(mode, &rows).value;
                prop_assert!((a - aggregate(mode, &perm).value).abs() < 1e-12);
                prop_assert!((a - aggregate(mode, &dup).value).abs() < 1e-12);
            }
        }
    }
}
