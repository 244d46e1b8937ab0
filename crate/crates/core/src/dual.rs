//! Forward-mode dual numbers.
//!
//! The boundary-value solver differentiates an endpoint map through a
//! fixed-step Runge-Kutta integration. The parameter count is small (the
//! initial velocity plus the strict upper triangle of `chi`), so forward
//! sensitivities are propagated by evaluating the integrator over dual
//! numbers carrying a fixed-width derivative vector. Everything numeric in
//! the integration kernels is written against the [`Real`] trait so the same
//! code runs at `f64` and at `Dual<N>`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar abstraction for the integration kernels: `f64` or [`Dual<N>`].
pub trait Real:
    Copy
    + Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(x: f64) -> Self;
    /// Primal (value) part.
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    /// Multiplication by a constant; cheaper than `self * Self::from_f64(c)`
    /// for dual numbers.
    fn scale(self, c: f64) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// Dual number with an `N`-dimensional derivative part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub dx: [f64; N],
}

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn constant(x: f64) -> Self {
        Dual { re: x, dx: [0.0; N] }
    }

    /// A variable seeded in derivative direction `i`.
    #[inline]
    pub fn seeded(x: f64, i: usize) -> Self {
        let mut dx = [0.0; N];
        dx[i] = 1.0;
        Dual { re: x, dx }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for i in 0..N {
            self.dx[i] += rhs.dx[i];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for i in 0..N {
            self.dx[i] -= rhs.dx[i];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = self.dx[i] * rhs.re + self.re * rhs.dx[i];
        }
        Dual { re: self.re * rhs.re, dx }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = (self.dx[i] - re * rhs.dx[i]) * inv;
        }
        Dual { re, dx }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for i in 0..N {
            self.dx[i] = -self.dx[i];
        }
        self
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> PartialOrd for Dual<N> {
    #[inline]
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn val(self) -> f64 {
        self.re
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        let half_inv = 0.5 / r;
        let mut dx = [0.0; N];
        for i in 0..N {
            dx[i] = self.dx[i] * half_inv;
        }
        Dual { re: r, dx }
    }
    #[inline]
    fn abs(self) -> Self {
        if self.re < 0.0 {
            -self
        } else {
            self
        }
    }
    #[inline]
    fn scale(mut self, c: f64) -> Self {
        self.re *= c;
        for i in 0..N {
            self.dx[i] *= c;
        }
        self
    }
}

// Small slice helpers used by the integration kernels.

#[inline]
pub(crate) fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Signature-weighted inner product `sum_i sig_i a_i b_i`. The signature is
/// `(1, ..., 1)` for Euclidean embeddings and `(1, 1, -1)` for the
/// hyperboloid model.
#[inline]
pub(crate) fn dot_sig<S: Real>(sig: &[f64], a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for i in 0..a.len() {
        acc += (a[i] * b[i]).scale(sig[i]);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Real>(x: S, y: S) -> S {
        // Smooth composite touching every trait operation.
        let s = (x * x + y * y + S::one()).sqrt();
        (x * y - y).scale(0.5) / s + (x - y.scale(2.0)).abs()
    }

    #[test]
    fn dual_matches_central_differences() {
        let (x0, y0) = (0.7, -1.3);
        let g = {
            let x = Dual::<2>::seeded(x0, 0);
            let y = Dual::<2>::seeded(y0, 1);
            f(x, y).dx
        };
        let h = 1e-6;
        let gx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let gy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((g[0] - gx).abs() < 1e-8, "dx {} vs fd {}", g[0], gx);
        assert!((g[1] - gy).abs() < 1e-8, "dy {} vs fd {}", g[1], gy);
    }

    #[test]
    fn primal_agrees_with_f64() {
        let v = f(Dual::<4>::seeded(0.3, 1), Dual::<4>::constant(0.9));
        assert_eq!(v.re, f(0.3_f64, 0.9));
    }

    #[test]
    fn division_derivative() {
        let x = Dual::<1>::seeded(2.0, 0);
        let y = x / (x * x);
        // d/dx (1/x) = -1/x^2
        assert!((y.re - 0.5).abs() < 1e-15);
        assert!((y.dx[0] + 0.25).abs() < 1e-15);
    }
}
