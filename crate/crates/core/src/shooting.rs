//! Boundary-value shooting: find `(v0, chi0)` so the forward path hits the
//! target with `chi(T) = 0`.
//!
//! The objective is the squared embedding-coordinate endpoint mismatch plus
//! the squared norm of `chi(T)`; the embedding mismatch is smooth
//! everywhere, including near cut loci, which is why it replaces the
//! Riemannian distance inside the solver. Gradients are forward-mode dual
//! sensitivities through the fixed-step integrator: the parameter space is
//! small (`d + d(d-1)/2`), so forward mode is cheap and needs no trajectory
//! storage. The optimizer is BFGS with backtracking; plain gradient descent
//! is available behind a flag. Because minimizers need not be unique, the
//! solver multi-starts over rotated initial directions and returns the
//! minimal-energy converged solution.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::development::Covariance;
use crate::dual::{Dual, Real};
use crate::dynamics::{mpp_final_state, unpack_antisymmetric};
use crate::error::{Error, Result};
use crate::geometry::{Manifold, Point};
use crate::path::PathRecord;

/// A complete boundary-value problem specification.
#[derive(Clone, Debug)]
pub struct ShootingProblem {
    pub manifold: Manifold,
    pub cov: Covariance,
    pub target: Point,
    /// Time horizon `T` of the forward integration.
    pub horizon: f64,
    /// Convergence threshold on `d(gamma(T), y)^2 + |chi(T)|^2`.
    pub tolerance: f64,
    pub max_iters: usize,
    pub step_count: usize,
    /// Multi-start count over rotated initial directions.
    pub restarts: usize,
    /// Use plain gradient descent instead of BFGS.
    pub gradient_descent: bool,
}

impl ShootingProblem {
    pub fn new(manifold: Manifold, cov: Covariance, target: Point, horizon: f64) -> Result<Self> {
        manifold.check_point(&target)?;
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        Ok(ShootingProblem {
            manifold,
            cov,
            target,
            horizon,
            tolerance: 1e-12,
            max_iters: 200,
            step_count: 200,
            restarts: 8,
            gradient_descent: false,
        })
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.step_count = steps;
        self
    }
}

/// Outcome of a shooting solve. `converged` implies `residual <= tolerance`;
/// a non-converged solve still carries its best iterate.
#[derive(Clone, Debug)]
pub struct ShootingResult {
    pub v0: DVector<f64>,
    pub chi0_upper: DVector<f64>,
    /// Final objective value `d(gamma(T), y)^2 + |chi(T)|^2`.
    pub residual: f64,
    pub iterations: usize,
    pub path: PathRecord,
    pub converged: bool,
    /// Objective value after each accepted optimizer step (starting with the
    /// initial value); non-increasing.
    pub objective_trace: Vec<f64>,
}

impl ShootingResult {
    pub fn chi0_matrix(&self) -> DMatrix<f64> {
        unpack_antisymmetric(&self.chi0_upper, self.v0.len())
    }

    /// Covariance-weighted speed of the solution; the path length is
    /// `speed * horizon`.
    pub fn weighted_speed(&self, cov: &Covariance) -> f64 {
        cov.weighted_speed(&self.v0)
    }
}

fn objective_scalar<S: Real>(p: &ShootingProblem, params: &[S]) -> S {
    let d = p.manifold.dim();
    let n = p.manifold.ambient_dim();
    let (v0, chi0) = params.split_at(d);
    let y = mpp_final_state(
        &p.manifold,
        p.cov.lambdas(),
        p.cov.frame(),
        v0,
        chi0,
        p.horizon,
        p.step_count,
    );
    let mut obj = S::zero();
    for c in 0..n {
        let diff = y[c] - S::from_f64(p.target.coords()[c]);
        obj += diff * diff;
    }
    let chi_final = &y[n * (1 + d) + d..];
    for chi in chi_final {
        obj += *chi * *chi;
    }
    obj
}

fn objective_value(p: &ShootingProblem, params: &[f64]) -> f64 {
    objective_scalar::<f64>(p, params)
}

fn objective_gradient_width<const N: usize>(
    p: &ShootingProblem,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let np = params.len();
    let duals: Vec<Dual<N>> = params
        .iter()
        .enumerate()
        .map(|(i, &x)| Dual::seeded(x, i))
        .collect();
    let obj = objective_scalar::<Dual<N>>(p, &duals);
    (obj.re, obj.dx[..np].to_vec())
}

fn objective_with_gradient(p: &ShootingProblem, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = match params.len() {
        1..=4 => objective_gradient_width::<4>(p, params),
        5..=8 => objective_gradient_width::<8>(p, params),
        9..=16 => objective_gradient_width::<16>(p, params),
        n => {
            return Err(Error::Unsupported(format!(
                "shooting supports up to 16 parameters, got {n}"
            )))
        }
    };
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("NaN in shooting objective or gradient".into()));
    }
    Ok((value, grad))
}

/// Gradient of the shooting objective with respect to `(v0, chi0)`, as
/// `(d/dv0, d/d chi0-upper)`.
pub fn shoot_gradient(
    p: &ShootingProblem,
    v0: &DVector<f64>,
    chi0: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = p.manifold.dim();
    let chi_upper = crate::dynamics::pack_antisymmetric(chi0)?;
    let mut params: Vec<f64> = v0.iter().copied().collect();
    params.extend(chi_upper.iter().copied());
    let (_, grad) = objective_with_gradient(p, &params)?;
    Ok((
        DVector::from_column_slice(&grad[..d]),
        DVector::from_column_slice(&grad[d..]),
    ))
}

/// One local optimization run from a given start.
fn optimize_from(p: &ShootingProblem, start: Vec<f64>) -> Result<LocalRun> {
    let np = start.len();
    let mut x = DVector::from_vec(start);
    let (mut value, grad) = objective_with_gradient(p, x.as_slice())?;
    let mut grad = DVector::from_vec(grad);
    let mut h_inv = DMatrix::<f64>::identity(np, np);
    let mut trace = vec![value];
    let mut iterations = 0;

    while value > p.tolerance && iterations < p.max_iters {
        if grad.norm() < 1e-15 {
            break; // stationary (possibly a non-global minimum)
        }
        let mut dir = if p.gradient_descent { -&grad } else { -(&h_inv * &grad) };
        let mut slope = dir.dot(&grad);
        if !(slope < 0.0) {
            // Reset to steepest descent on loss of curvature information.
            h_inv = DMatrix::identity(np, np);
            dir = -&grad;
            slope = dir.dot(&grad);
        }

        // Backtracking Armijo line search.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * alpha;
            let cand_value = objective_value(p, cand.as_slice());
            if cand_value.is_finite() && cand_value <= value + 1e-4 * alpha * slope {
                accepted = Some((cand, cand_value));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, value_new)) = accepted else {
            break; // line search failed; keep the best iterate
        };

        let (_, grad_new) = objective_with_gradient(p, x_new.as_slice())?;
        let grad_new = DVector::from_vec(grad_new);
        if !p.gradient_descent {
            let s = &x_new - &x;
            let yv = &grad_new - &grad;
            let sy = s.dot(&yv);
            if sy > 1e-12 * s.norm() * yv.norm() {
                // BFGS inverse update.
                let rho = 1.0 / sy;
                let hy = &h_inv * &yv;
                let yhy = yv.dot(&hy);
                h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                    - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            }
        }
        x = x_new;
        value = value_new;
        grad = grad_new;
        iterations += 1;
        trace.push(value);
    }

    Ok(LocalRun { params: x, value, iterations, trace })
}

struct LocalRun {
    params: DVector<f64>,
    value: f64,
    iterations: usize,
    trace: Vec<f64>,
}

/// Default initial guess: the logarithm-map direction divided by the
/// horizon (exact in flat space and for isotropic covariances), `chi0 = 0`.
/// On the torus a projected-chord direction is used instead of the exact
/// logarithm.
fn default_initial_velocity(p: &ShootingProblem) -> DVector<f64> {
    let m = &p.manifold;
    let x = p.cov.base();
    let dir = match m {
        Manifold::Torus { .. } => {
            let mut chord: Vec<f64> = (p.target.coords() - x.coords())
                .iter()
                .copied()
                .collect();
            m.project_tangent(x.coords().as_slice(), &mut chord);
            DVector::from_vec(chord)
        }
        _ => m.log_map(x, &p.target).unwrap_or_else(|_| DVector::zeros(m.ambient_dim())),
    };
    p.cov.frame().components(m, &dir) / p.horizon
}

fn initial_guesses(p: &ShootingProblem) -> Vec<Vec<f64>> {
    let d = p.manifold.dim();
    let q = d * (d - 1) / 2;
    let v0 = default_initial_velocity(p);
    let mut guesses = Vec::new();
    let restarts = p.restarts.max(1);
    let speed = p.cov.weighted_speed(&v0).max(1e-3);
    for k in 0..restarts {
        let mut params = vec![0.0; d + q];
        if d == 2 {
            let angle = std::f64::consts::TAU * k as f64 / restarts as f64;
            let (c, s) = (angle.cos(), angle.sin());
            params[0] = c * v0[0] - s * v0[1];
            params[1] = s * v0[0] + c * v0[1];
        } else {
            // Beyond surfaces, perturb the default guess deterministically.
            for i in 0..d {
                params[i] = v0[i] + 0.1 * speed * ((k * (i + 1)) as f64).sin();
            }
        }
        guesses.push(params);
        if k == 0 {
            continue;
        }
    }
    guesses
}

fn run_to_result(p: &ShootingProblem, run: LocalRun) -> Result<ShootingResult> {
    let d = p.manifold.dim();
    let v0 = DVector::from_column_slice(&run.params.as_slice()[..d]);
    let chi_upper = DVector::from_column_slice(&run.params.as_slice()[d..]);
    let path = crate::dynamics::integrate_mpp_upper(
        &p.manifold,
        &p.cov,
        &v0,
        &chi_upper,
        p.horizon,
        p.step_count,
    )?;
    Ok(ShootingResult {
        v0,
        chi0_upper: chi_upper,
        residual: run.value,
        iterations: run.iterations,
        path,
        converged: run.value <= p.tolerance,
        objective_trace: run.trace,
    })
}

/// Deterministic preference order: converged before not, then smaller
/// energy (weighted speed), then lexicographic on the parameters.
fn better(p: &ShootingProblem, a: &ShootingResult, b: &ShootingResult) -> bool {
    if a.converged != b.converged {
        return a.converged;
    }
    if !a.converged {
        return a.residual < b.residual;
    }
    let (ca, cb) = (a.weighted_speed(&p.cov), b.weighted_speed(&p.cov));
    if (ca - cb).abs() > 1e-12 * (1.0 + ca.max(cb)) {
        return ca < cb;
    }
    for i in 0..a.v0.len() {
        if a.v0[i] != b.v0[i] {
            return a.v0[i] < b.v0[i];
        }
    }
    false
}

/// Runs all restarts and returns the distinct converged solutions sorted by
/// energy (all best iterates if nothing converged).
pub fn shoot_all(p: &ShootingProblem, init: Option<(&DVector<f64>, &DMatrix<f64>)>) -> Result<Vec<ShootingResult>> {
    let guesses: Vec<Vec<f64>> = match init {
        Some((v0, chi0)) => {
            let chi_upper = crate::dynamics::pack_antisymmetric(chi0)?;
            let mut params: Vec<f64> = v0.iter().copied().collect();
            params.extend(chi_upper.iter().copied());
            vec![params]
        }
        None => initial_guesses(p),
    };
    let runs: Vec<Result<LocalRun>> = guesses
        .into_par_iter()
        .map(|g| optimize_from(p, g))
        .collect();
    let mut results = Vec::new();
    for run in runs {
        results.push(run_to_result(p, run?)?);
    }
    // Deduplicate near-identical parameter vectors.
    let mut distinct: Vec<ShootingResult> = Vec::new();
    for r in results {
        let dup = distinct.iter_mut().find(|e| {
            (&e.v0 - &r.v0).amax() + (&e.chi0_upper - &r.chi0_upper).amax() < 1e-6
        });
        match dup {
            Some(e) => {
                if better(p, &r, e) {
                    *e = r;
                }
            }
            None => distinct.push(r),
        }
    }
    distinct.sort_by(|a, b| {
        if better(p, a, b) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    Ok(distinct)
}

/// Solves the boundary-value problem. With an explicit `init` only that
/// start is used; otherwise the default guess plus rotated restarts. The
/// minimal-energy converged solution is returned; a non-converged best
/// iterate is returned with `converged = false` rather than an error.
pub fn shoot(p: &ShootingProblem, init: Option<(&DVector<f64>, &DMatrix<f64>)>) -> Result<ShootingResult> {
    let all = shoot_all(p, init)?;
    all.into_iter()
        .next()
        .ok_or_else(|| Error::Numerical("no shooting run produced a result".into()))
}

/// The covariance-weighted distance realized by the boundary-value solve:
/// `c T` of the converged solution. Uses a tight residual threshold so the
/// value is accurate well beyond the requested tolerance.
pub fn mpp_distance(m: &Manifold, cov: &Covariance, target: &Point, step_count: usize) -> Result<f64> {
    if target.chord_distance(cov.base()) == 0.0 {
        return Ok(0.0);
    }
    let mut p = ShootingProblem::new(m.clone(), cov.clone(), target.clone(), 1.0)?;
    p.tolerance = 1e-20;
    p.step_count = step_count;
    p.max_iters = 400;
    let mut best: Option<ShootingResult> = None;
    for attempt in 0..2 {
        let r = shoot(&p, None)?;
        if r.converged || r.residual <= 1e-16 {
            return Ok(r.weighted_speed(&p.cov) * p.horizon);
        }
        best = Some(r);
        p.step_count *= 2;
        p.restarts = p.restarts.max(8) * (attempt + 2);
    }
    let r = best.unwrap();
    if r.residual <= 1e-12 {
        // Close enough that c T is still accurate to ~1e-6.
        return Ok(r.weighted_speed(&p.cov) * p.horizon);
    }
    Err(Error::Numerical(format!(
        "distance solve did not converge (residual {:.3e})",
        r.residual
    )))
}
