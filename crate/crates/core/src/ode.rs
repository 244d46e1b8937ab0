//! Fixed-step classical Runge-Kutta driver shared by the integration kernels.
//!
//! The systems integrated here are small (a point, a frame, and a few extra
//! coordinates), so states are flat scalar vectors and the driver is generic
//! over the scalar type to allow dual-number sensitivity propagation.

use crate::dual::Real;

pub(crate) trait OdeSystem<S: Real> {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[S], dy: &mut [S]);
    /// Post-step drift control (manifold projection, frame re-orthonormalization).
    fn stabilize(&self, _y: &mut [S]) {}
}

/// Classical RK4 with `n_steps` equal steps of size `h` starting at `t0`.
/// `observe` is called with `(step_index, t, state)` including the initial
/// state at index 0.
pub(crate) fn integrate_fixed<S: Real, Sys: OdeSystem<S>>(
    sys: &Sys,
    y: &mut [S],
    t0: f64,
    h: f64,
    n_steps: usize,
    mut observe: impl FnMut(usize, f64, &[S]),
) {
    let n = sys.dim();
    let mut k1 = vec![S::zero(); n];
    let mut k2 = vec![S::zero(); n];
    let mut k3 = vec![S::zero(); n];
    let mut k4 = vec![S::zero(); n];
    let mut tmp = vec![S::zero(); n];

    observe(0, t0, y);
    for step in 0..n_steps {
        let t = t0 + h * step as f64;
        sys.rhs(t, y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + k1[i].scale(0.5 * h);
        }
        sys.rhs(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + k2[i].scale(0.5 * h);
        }
        sys.rhs(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + k3[i].scale(h);
        }
        sys.rhs(t + h, &tmp, &mut k4);
        for i in 0..n {
            y[i] += (k1[i] + (k2[i] + k3[i]).scale(2.0) + k4[i]).scale(h / 6.0);
        }
        sys.stabilize(y);
        observe(step + 1, t + h, y);
    }
}
