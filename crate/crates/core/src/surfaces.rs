//! Closed-form most probable paths on constant-curvature surfaces.
//!
//! On a surface of constant Gaussian curvature `kappa` the unit-speed path
//! system reduces to a pendulum for the velocity angle `theta`:
//!
//! ```text
//! theta' = kappa h,   h' = -((l1^2 - l2^2)/2) sin(2 theta),   h(T) = 0,
//! ```
//!
//! whose solutions are Jacobi elliptic functions with frequency
//! `alpha^2 = (l1^2 - l2^2) |kappa|` and modulus `k = sin(psi0 / 2)`. For
//! positive curvature the velocity oscillates about the large-eigenvalue
//! axis, for negative curvature about the small-eigenvalue axis. The curve
//! itself is recovered by integrating in SO(3) (sphere) or SO(2,1)
//! (hyperboloid) with per-step projection back to the group.

use nalgebra::{DMatrix, DVector};

use crate::development::Covariance;
use crate::dynamics::unpack_antisymmetric;
use crate::elliptic::{elliptic_k, jacobi_sn_cn_dn};
use crate::error::{Error, Result};
use crate::geometry::{Frame, Manifold, Point};
use crate::ode::{integrate_fixed, OdeSystem};
use crate::path::PathRecord;
use crate::shooting::{shoot, ShootingProblem};

/// Moduli above this are treated as the separatrix and rejected; callers
/// should fall back to direct integration of the pendulum system.
pub const SEPARATRIX_GUARD: f64 = 1.0 - 1e-8;

/// Frequency, modulus and quarter period of the pendulum reduction.
#[derive(Clone, Copy, Debug)]
pub struct EllipticParams {
    /// Modulus `|sin(psi0/2)|` in `[0, 1)`.
    pub modulus: f64,
    /// Quarter period `K(modulus)`.
    pub quarter_period: f64,
    /// Pendulum frequency `alpha = sqrt((l1^2 - l2^2) |kappa|)`.
    pub frequency: f64,
}

/// Pendulum state `(theta, h)` with the conserved unit weighted speed.
#[derive(Clone, Copy, Debug)]
pub struct PendulumState {
    pub theta: f64,
    pub h: f64,
    pub speed: f64,
}

/// Closed-form velocity curve of a unit-speed most probable path on a
/// constant-curvature surface.
#[derive(Clone, Debug)]
pub struct ClosedFormMpp {
    pub kappa: f64,
    pub lambdas: (f64, f64),
    pub psi0: f64,
    pub horizon: f64,
    /// Sign of the non-oscillating velocity component.
    pub branch: f64,
    pub params: EllipticParams,
    k_signed: f64,
}

/// Builds the closed-form velocity curve. `psi0` parametrizes the terminal
/// velocity angle, `branch` (+1/-1) selects the sign of the dominant
/// component. Rejects the separatrix `|sin(psi0/2)| -> 1` and flat space.
pub fn pendulum_mpp(
    kappa: f64,
    lambdas: (f64, f64),
    psi0: f64,
    branch: f64,
    horizon: f64,
) -> Result<ClosedFormMpp> {
    let (l1, l2) = lambdas;
    if !(l1 >= l2 && l2 > 0.0) {
        return Err(Error::InvalidArgument("eigenvalue roots must satisfy l1 >= l2 > 0".into()));
    }
    if kappa == 0.0 {
        return Err(Error::Unsupported("flat space has no pendulum reduction".into()));
    }
    if psi0.abs() >= std::f64::consts::PI {
        return Err(Error::InvalidArgument("|psi0| must be below pi".into()));
    }
    if branch != 1.0 && branch != -1.0 {
        return Err(Error::InvalidArgument("branch must be +1 or -1".into()));
    }
    let k_signed = (0.5 * psi0).sin();
    let modulus = k_signed.abs();
    if modulus > SEPARATRIX_GUARD {
        return Err(Error::InvalidArgument(
            "psi0 too close to the separatrix; integrate the pendulum system instead".into(),
        ));
    }
    let quarter_period = elliptic_k(modulus)?;
    let frequency = ((l1 * l1 - l2 * l2) * kappa.abs()).sqrt();
    Ok(ClosedFormMpp {
        kappa,
        lambdas,
        psi0,
        horizon,
        branch,
        params: EllipticParams { modulus, quarter_period, frequency },
        k_signed,
    })
}

impl ClosedFormMpp {
    fn elliptic_at(&self, t: f64) -> (f64, f64, f64) {
        let u = self.params.quarter_period + self.params.frequency * (self.horizon - t);
        jacobi_sn_cn_dn(u, self.params.modulus).expect("modulus validated at construction")
    }

    /// Frame components of the velocity at time `t`; satisfies
    /// `v1^2/l1^2 + v2^2/l2^2 = 1` identically.
    pub fn velocity(&self, t: f64) -> (f64, f64) {
        let (sn, _, dn) = self.elliptic_at(t);
        let (l1, l2) = self.lambdas;
        if self.kappa > 0.0 {
            (self.branch * l1 * dn, l2 * self.k_signed * sn)
        } else {
            (l1 * self.k_signed * sn, self.branch * l2 * dn)
        }
    }

    /// Velocity angle: `v = (l1 cos(theta), l2 sin(theta))`.
    pub fn theta(&self, t: f64) -> f64 {
        let (v1, v2) = self.velocity(t);
        (v2 / self.lambdas.1).atan2(v1 / self.lambdas.0)
    }

    /// The pendulum momentum `h(t) = theta' / kappa`; `h(T) = 0`.
    pub fn h(&self, t: f64) -> f64 {
        let (_, cn, _) = self.elliptic_at(t);
        let a = self.params.frequency * self.k_signed * cn;
        if self.kappa > 0.0 {
            -self.branch * a / self.kappa
        } else {
            self.branch * a / self.kappa
        }
    }

    pub fn pendulum_state(&self, t: f64) -> PendulumState {
        PendulumState { theta: self.theta(t), h: self.h(t), speed: 1.0 }
    }

    /// `chi_12(t) = h(t) / (l1 l2)` at unit speed.
    pub fn chi12(&self, t: f64) -> f64 {
        self.h(t) / (self.lambdas.0 * self.lambdas.1)
    }

    /// Matched initial data `(v0, chi0)` for the generic path integrator;
    /// guarantees `chi(T) = 0` up to integration error.
    pub fn initial_conditions(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (v1, v2) = self.velocity(0.0);
        let chi0 = unpack_antisymmetric(&DVector::from_vec(vec![self.chi12(0.0)]), 2);
        (DVector::from_vec(vec![v1, v2]), chi0)
    }
}

// ---------------------------------------------------------------------------
// Group integration
// ---------------------------------------------------------------------------

fn mat3_mul(a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
}

fn mat3_inv(a: &[f64], out: &mut [f64]) -> bool {
    let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6]);
    if det.abs() < 1e-300 {
        return false;
    }
    let inv = 1.0 / det;
    out[0] = (a[4] * a[8] - a[5] * a[7]) * inv;
    out[1] = (a[2] * a[7] - a[1] * a[8]) * inv;
    out[2] = (a[1] * a[5] - a[2] * a[4]) * inv;
    out[3] = (a[5] * a[6] - a[3] * a[8]) * inv;
    out[4] = (a[0] * a[8] - a[2] * a[6]) * inv;
    out[5] = (a[2] * a[3] - a[0] * a[5]) * inv;
    out[6] = (a[3] * a[7] - a[4] * a[6]) * inv;
    out[7] = (a[1] * a[6] - a[0] * a[7]) * inv;
    out[8] = (a[0] * a[4] - a[1] * a[3]) * inv;
    true
}

/// Newton polar iteration `X <- (X + X^{-T}) / 2`, projecting onto SO(3).
pub(crate) fn polar_project_so3(q: &mut [f64]) {
    let mut inv = [0.0; 9];
    for _ in 0..4 {
        if !mat3_inv(q, &mut inv) {
            return;
        }
        let mut delta: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let next = 0.5 * (q[i * 3 + j] + inv[j * 3 + i]);
                delta = delta.max((next - q[i * 3 + j]).abs());
                q[i * 3 + j] = next;
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
}

/// Newton iteration `X <- (X + J X^{-T} J) / 2` with `J = diag(1, 1, -1)`,
/// projecting onto SO(2,1) (preserves `q^T J q = J`).
pub(crate) fn polar_project_so21(q: &mut [f64]) {
    let jsig = |i: usize| if i == 2 { -1.0 } else { 1.0 };
    let mut inv = [0.0; 9];
    for _ in 0..6 {
        if !mat3_inv(q, &mut inv) {
            return;
        }
        let mut delta: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let next = 0.5 * (q[i * 3 + j] + jsig(i) * jsig(j) * inv[j * 3 + i]);
                delta = delta.max((next - q[i * 3 + j]).abs());
                q[i * 3 + j] = next;
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
}

/// Max violation of the group constraint: `|q^T q - I|` (SO(3)) or
/// `|q^T J q - J|` (SO(2,1)), entrywise.
pub fn group_residual(q: &[f64], lorentz: bool) -> f64 {
    let jsig = |i: usize| if lorentz && i == 2 { -1.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += q[k * 3 + i] * jsig(k) * q[k * 3 + j];
            }
            let target = if i == j { jsig(i) } else { 0.0 };
            worst = worst.max((acc - target).abs());
        }
    }
    worst
}

/// Right-invariant flow `q' = q M(t)` on SO(3) or SO(2,1) with
/// `M = (1/r) [[0, 0, v1], [0, 0, v2], [s v1, s v2, 0]]`, `s = -1` on the
/// sphere and `+1` on the hyperboloid.
pub(crate) struct GroupFlow<V> {
    pub radius: f64,
    pub lorentz: bool,
    pub velocity: V,
}

impl<V: Fn(f64) -> (f64, f64)> OdeSystem<f64> for GroupFlow<V> {
    fn dim(&self) -> usize {
        9
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let (v1, v2) = (self.velocity)(t);
        let s = if self.lorentz { 1.0 } else { -1.0 };
        let r = self.radius;
        let m = [0.0, 0.0, v1 / r, 0.0, 0.0, v2 / r, s * v1 / r, s * v2 / r, 0.0];
        mat3_mul(y, &m, dy);
    }

    fn stabilize(&self, y: &mut [f64]) {
        if self.lorentz {
            polar_project_so21(y);
        } else {
            polar_project_so3(y);
        }
    }
}

/// Integrates the group representation of the closed-form path and maps it
/// back to the surface: `gamma(t) = [f1(0) f2(0) x/r] q(t) (0, 0, r)^T`.
pub fn mpp_constant_curvature(
    m: &Manifold,
    cov: &Covariance,
    psi0: f64,
    branch: f64,
    horizon: f64,
    n_steps: usize,
) -> Result<PathRecord> {
    let (radius, lorentz, kappa) = match m {
        Manifold::Sphere { radius } => (*radius, false, 1.0 / (radius * radius)),
        Manifold::Hyperbolic { radius } => (*radius, true, -1.0 / (radius * radius)),
        _ => {
            return Err(Error::Unsupported(
                "closed-form paths require a constant-curvature surface".into(),
            ))
        }
    };
    if n_steps == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidArgument("need a positive horizon and at least one step".into()));
    }
    let lambdas = (cov.lambdas()[0], cov.lambdas()[1]);
    let cf = pendulum_mpp(kappa, lambdas, psi0, branch, horizon)?;

    // Column frame [f1(0), f2(0), x / r].
    let f = cov.frame();
    let x = cov.base().coords().clone();
    let b: Vec<DVector<f64>> = vec![f.vector(0), f.vector(1), &x / radius];

    let sys = GroupFlow { radius, lorentz, velocity: |t: f64| cf.velocity(t) };
    let mut q = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let h = horizon / n_steps as f64;

    let count = n_steps + 1;
    let mut times = Vec::with_capacity(count);
    let mut points = Vec::with_capacity(count);
    let mut velocities = Vec::with_capacity(count);
    let mut chis = Vec::with_capacity(count);
    let mut speeds = Vec::with_capacity(count);
    let mut energies = Vec::with_capacity(count);

    let gamma_of = |q: &[f64]| -> DVector<f64> {
        // q (0,0,r)^T then apply the column frame.
        let col = [q[2] * radius, q[5] * radius, q[8] * radius];
        &b[0] * col[0] + &b[1] * col[1] + &b[2] * col[2]
    };

    integrate_fixed(&sys, &mut q, 0.0, h, n_steps, |_k, t, state| {
        let (v1, v2) = cf.velocity(t);
        times.push(t);
        points.push(gamma_of(state));
        velocities.push(DVector::from_vec(vec![v1, v2]));
        chis.push(DVector::from_vec(vec![cf.chi12(t)]));
        speeds.push((v1 * v1 / (lambdas.0 * lambdas.0) + v2 * v2 / (lambdas.1 * lambdas.1)).sqrt());
        energies.push(0.5 * t);
    });

    // Transported frame columns at the endpoints.
    let frame_at = |q: &[f64], p: &Point| -> Result<Frame> {
        let cols: Vec<DVector<f64>> = (0..2)
            .map(|i| &b[0] * q[i] + &b[1] * q[3 + i] + &b[2] * q[6 + i])
            .collect();
        Frame::new(m, p.clone(), cols)
    };
    let end = m.point(points.last().unwrap().clone())?;
    let final_frame = frame_at(&q, &end)?;

    Ok(PathRecord {
        times,
        points,
        velocities,
        chis,
        speeds,
        energies,
        initial_frame: f.clone(),
        final_frame,
    })
}

// ---------------------------------------------------------------------------
// Bending statistic
// ---------------------------------------------------------------------------

/// Signed area between the most probable path from the covariance's base to
/// `y` and the Riemannian geodesic between the same endpoints, measured in
/// normal coordinates aligned with the covariance eigenframe and oriented so
/// that positive values mean the path lies on the large-eigenvalue side.
/// Requires a geometry with a closed-form logarithm map.
pub fn bending_statistic(m: &Manifold, cov: &Covariance, y: &Point, step_count: usize) -> Result<f64> {
    if matches!(m, Manifold::Torus { .. }) {
        return Err(Error::Unsupported(
            "the bending statistic needs a closed-form logarithm map".into(),
        ));
    }
    let mut problem = ShootingProblem::new(m.clone(), cov.clone(), y.clone(), 1.0)?;
    problem.tolerance = 1e-18;
    problem.step_count = step_count;
    problem.max_iters = 300;
    let result = shoot(&problem, None)?;
    if !result.converged {
        return Err(Error::Numerical("shooting did not converge for the bending target".into()));
    }
    let x = cov.base();
    let f = cov.frame();

    let chart = |p: &DVector<f64>| -> Result<[f64; 2]> {
        let q = m.point(p.clone())?;
        let u = m.log_map(x, &q)?;
        Ok([
            m.ip(f.vector(0).as_slice(), u.as_slice()),
            m.ip(f.vector(1).as_slice(), u.as_slice()),
        ])
    };

    let mut w: Vec<[f64; 2]> = Vec::with_capacity(result.path.points.len());
    for p in &result.path.points {
        w.push(chart(p)?);
    }
    let wy = *w.last().unwrap();
    // Orient the chart so the target has a positive second component; the
    // geodesic is the straight chord from the origin, so closing the
    // polygon yields the signed area between the two curves.
    let flip = if wy[1] < 0.0 { -1.0 } else { 1.0 };
    let mut area = 0.0;
    for k in 0..w.len() - 1 {
        let (a, b) = (w[k], w[k + 1]);
        area += 0.5 * (a[0] * flip * b[1] - b[0] * flip * a[1]);
    }
    Ok(area)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate_mpp;

    fn sphere_cov(l1: f64, l2: f64) -> (Manifold, Covariance) {
        let m = Manifold::sphere(1.0).unwrap();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let c = Covariance::new(&m, f, vec![l1, l2]).unwrap();
        (m, c)
    }

    #[test]
    fn zero_psi_gives_constant_velocity() {
        let cf = pendulum_mpp(1.0, (2.0, 1.0), 0.0, 1.0, 1.0).unwrap();
        for &t in &[0.0, 0.3, 0.9] {
            let (v1, v2) = cf.velocity(t);
            assert!((v1 - 2.0).abs() < 1e-14);
            assert!(v2.abs() < 1e-14);
        }
    }

    #[test]
    fn equal_eigenvalues_give_geodesic_for_any_psi() {
        let cf = pendulum_mpp(1.0, (1.5, 1.5), 1.0, 1.0, 2.0).unwrap();
        let (v1a, v2a) = cf.velocity(0.0);
        for &t in &[0.5, 1.3, 2.0] {
            let (v1, v2) = cf.velocity(t);
            assert!((v1 - v1a).abs() < 1e-13);
            assert!((v2 - v2a).abs() < 1e-13);
        }
    }

    #[test]
    fn speed_identity_holds_pointwise() {
        for &kappa in &[1.0, -1.0] {
            let cf = pendulum_mpp(kappa, (2.0, 1.0), 1.3, -1.0, 1.5).unwrap();
            for i in 0..=100 {
                let t = 1.5 * i as f64 / 100.0;
                let (v1, v2) = cf.velocity(t);
                let c2 = v1 * v1 / 4.0 + v2 * v2;
                assert!((c2 - 1.0).abs() <= 1e-10, "speed identity at t={t}");
            }
        }
    }

    #[test]
    fn terminal_condition_h_vanishes() {
        for &kappa in &[1.0, -1.0] {
            for &psi0 in &[0.4, 1.1, 2.4, -0.9] {
                let cf = pendulum_mpp(kappa, (2.0, 1.0), psi0, 1.0, 0.8).unwrap();
                assert!(cf.h(0.8).abs() <= 1e-12);
                // Centered finite-difference check that theta'(T) = 0 (the
                // closed form extends smoothly past T).
                let eps = 1e-6;
                let dtheta = (cf.theta(0.8 + eps) - cf.theta(0.8 - eps)) / (2.0 * eps);
                assert!(dtheta.abs() <= 1e-8, "theta'(T) = {dtheta}");
            }
        }
    }

    #[test]
    fn closed_form_matches_pendulum_ode() {
        // Independent oracle: RK4 integration of the reduced system
        // theta' = kappa h, h' = -((l1^2-l2^2)/2) sin(2 theta)
        // from the terminal state backwards.
        let (l1, l2) = (2.0_f64, 1.0_f64);
        for &(kappa, psi0, horizon) in
            &[(1.0, std::f64::consts::FRAC_PI_2, 0.5), (1.0, 2.0, 1.0), (-1.0, 1.2, 0.8)]
        {
            let cf = pendulum_mpp(kappa, (l1, l2), psi0, 1.0, horizon).unwrap();
            let n = 4000;
            let h_step = horizon / n as f64;
            let mut th = cf.theta(horizon);
            let mut hh = 0.0_f64;
            let rhs = |th: f64, hh: f64| -> (f64, f64) {
                (kappa * hh, -(l1 * l1 - l2 * l2) * 0.5 * (2.0 * th).sin())
            };
            let mut sup: f64 = 0.0;
            for k in 0..=n {
                let t = horizon - k as f64 * h_step;
                let (v1, v2) = cf.velocity(t);
                sup = sup.max((v1 - l1 * th.cos()).abs().max((v2 - l2 * th.sin()).abs()));
                if k == n {
                    break;
                }
                // RK4 going backwards in time.
                let hs = -h_step;
                let (k1t, k1h) = rhs(th, hh);
                let (k2t, k2h) = rhs(th + 0.5 * hs * k1t, hh + 0.5 * hs * k1h);
                let (k3t, k3h) = rhs(th + 0.5 * hs * k2t, hh + 0.5 * hs * k2h);
                let (k4t, k4h) = rhs(th + hs * k3t, hh + hs * k3h);
                th += hs / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t);
                hh += hs / 6.0 * (k1h + 2.0 * k2h + 2.0 * k3h + k4h);
            }
            assert!(sup <= 1e-6, "pendulum oracle deviation {sup} (kappa={kappa}, psi0={psi0})");
        }
    }

    #[test]
    fn pendulum_energy_is_conserved() {
        // (1/2)(2 theta')^2 / alpha^2 - cos(2 theta) along the closed form.
        let cf = pendulum_mpp(1.0, (2.0, 1.0), 1.7, 1.0, 1.2).unwrap();
        let alpha = cf.params.frequency;
        let energy = |t: f64| {
            let th_dot = cf.kappa * cf.h(t);
            0.5 * (2.0 * th_dot) * (2.0 * th_dot) / (alpha * alpha) - (2.0 * cf.theta(t)).cos()
        };
        let e0 = energy(0.0);
        for i in 1..=50 {
            let t = 1.2 * i as f64 / 50.0;
            assert!(((energy(t) - e0) / e0.abs()).abs() <= 1e-7, "pendulum energy drift at {t}");
        }
    }

    #[test]
    fn theta_period_matches_elliptic_prediction() {
        let cf = pendulum_mpp(1.0, (2.0, 1.0), 1.9, 1.0, 20.0).unwrap();
        let period = 4.0 * cf.params.quarter_period / cf.params.frequency;
        for i in 0..=40 {
            let t = i as f64 * 0.3;
            let a = cf.theta(t);
            let b = cf.theta(t + period);
            assert!(
                ((a - b) / period).abs() <= 1e-6 / period,
                "period mismatch at t={t}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn separatrix_is_rejected() {
        let err = pendulum_mpp(1.0, (2.0, 1.0), std::f64::consts::PI - 1e-9, 1.0, 1.0);
        assert!(err.is_err());
    }

    #[test]
    fn group_path_stays_on_sphere_and_matches_generic_integrator() {
        let (m, cov) = sphere_cov(2.0, 1.0);
        let (psi0, horizon) = (std::f64::consts::FRAC_PI_2, 0.5);
        let n = 500;
        let rec = mpp_constant_curvature(&m, &cov, psi0, 1.0, horizon, n).unwrap();
        for p in &rec.points {
            assert!((p.norm() - 1.0).abs() <= 1e-9);
        }
        let cf = pendulum_mpp(1.0, (2.0, 1.0), psi0, 1.0, horizon).unwrap();
        let (v0, chi0) = cf.initial_conditions();
        let generic = integrate_mpp(&m, &cov, &v0, &chi0, horizon, n).unwrap();
        let sup = rec.max_pointwise_distance(&generic).unwrap();
        assert!(sup <= 1e-5, "closed form vs generic deviation {sup}");
        // chi(T) = 0 for the matched data.
        assert!(generic.final_chi_norm_squared().sqrt() <= 1e-8);
    }

    #[test]
    fn group_path_matches_generic_on_hyperboloid() {
        let m = Manifold::hyperbolic(1.0).unwrap();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let cov = Covariance::new(&m, f, vec![2.0, 1.0]).unwrap();
        let (psi0, horizon) = (1.1, 0.9);
        let n = 900;
        let rec = mpp_constant_curvature(&m, &cov, psi0, -1.0, horizon, n).unwrap();
        for pt in &rec.points {
            let res = (pt[0] * pt[0] + pt[1] * pt[1] - pt[2] * pt[2] + 1.0).abs();
            assert!(res <= 1e-9, "hyperboloid residual {res}");
        }
        let cf = pendulum_mpp(-1.0, (2.0, 1.0), psi0, -1.0, horizon).unwrap();
        let (v0, chi0) = cf.initial_conditions();
        let generic = integrate_mpp(&m, &cov, &v0, &chi0, horizon, n).unwrap();
        let sup = rec.max_pointwise_distance(&generic).unwrap();
        assert!(sup <= 1e-5, "closed form vs generic deviation {sup}");
        assert!(generic.final_chi_norm_squared().sqrt() <= 1e-8);
    }

    #[test]
    fn isotropic_group_integration_is_great_circle() {
        let (m, _) = sphere_cov(2.0, 1.0);
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let cov = Covariance::new(&m, f, vec![1.0, 1.0]).unwrap();
        let rec = mpp_constant_curvature(&m, &cov, 0.0, 1.0, std::f64::consts::PI, 3141).unwrap();
        assert!((rec.endpoint().coords() + p.coords()).norm() <= 1e-6);
    }

    #[test]
    fn group_projection_keeps_residual_small() {
        let mut q = [1.0, 1e-4, 0.0, -2e-4, 1.0, 3e-4, 0.0, -1e-4, 1.0];
        polar_project_so3(&mut q);
        assert!(group_residual(&q, false) <= 1e-12);
        let mut q = [1.0, 1e-4, 2e-4, -2e-4, 1.0, 3e-4, 2e-4, 3e-4, 1.0];
        polar_project_so21(&mut q);
        assert!(group_residual(&q, true) <= 1e-12);
    }
}
