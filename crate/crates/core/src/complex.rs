//! Complex numbers over any [`Real`] scalar.
//!
//! `num_complex::Complex` cannot carry tape variables through its
//! transcendental functions, so the photonic simulation uses this small type.

use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;

use crate::autodiff::Real;

#[derive(Clone, Copy, Debug)]
pub struct Cx<R> {
    pub re: R,
    pub im: R,
}

impl<R: Real> Cx<R> {
    pub fn new(re: R, im: R) -> Self {
        Cx { re, im }
    }

    pub fn zero() -> Self {
        Cx::new(R::zero(), R::zero())
    }

    pub fn real(re: R) -> Self {
        Cx::new(re, R::zero())
    }

    pub fn from_c64(z: Complex64) -> Self {
        Cx::new(R::cst(z.re), R::cst(z.im))
    }

    /// `e^{iθ}`.
    pub fn cis(theta: R) -> Self {
        Cx::new(theta.cos(), theta.sin())
    }

    pub fn conj(self) -> Self {
        Cx::new(self.re, -self.im)
    }

    pub fn norm_sqr(self) -> R {
        self.re * self.re + self.im * self.im
    }

    pub fn scale(self, s: R) -> Self {
        Cx::new(self.re * s, self.im * s)
    }

    pub fn scale_f(self, s: f64) -> Self {
        Cx::new(self.re * s, self.im * s)
    }

    /// Multiplication by a constant complex factor.
    pub fn mul_c(self, z: Complex64) -> Self {
        Cx::new(self.re * z.re - self.im * z.im, self.re * z.im + self.im * z.re)
    }

    pub fn value(self) -> Complex64 {
        Complex64::new(self.re.val(), self.im.val())
    }
}

impl<R: Real> Add for Cx<R> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Cx::new(self.re + o.re, self.im + o.im)
    }
}

impl<R: Real> Sub for Cx<R> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Cx::new(self.re - o.re, self.im - o.im)
    }
}

impl<R: Real> Mul for Cx<R> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Cx::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
}

impl<R: Real> Neg for Cx<R> {
    type Output = Self;
    fn neg(self) -> Self {
        Cx::new(-self.re, -self.im)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agrees_with_num_complex() {
        let a = Complex64::new(0.3, -1.2);
        let b = Complex64::new(-0.7, 0.4);
        let p = (Cx::<f64>::from_c64(a) * Cx::from_c64(b)).value();
        assert!((p - a * b).norm() < 1e-15);
        let e = Cx::<f64>::cis(0.9).value();
        assert!((e - Complex64::from_polar(1.0, 0.9)).norm() < 1e-15);
        assert!((Cx::<f64>::from_c64(a).norm_sqr() - a.norm_sqr()).abs() < 1e-15);
    }
}
