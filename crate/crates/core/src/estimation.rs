//! Mean and covariance estimation from samples.
//!
//! The estimator minimizes `(1/2n) sum_i (d(y_i; x, Sigma)^2 + ln det_g Sigma)`
//! where `d` is the covariance-weighted path distance realized by the
//! shooting solver. Writing `Sigma = C Sigma'` with `det_g Sigma' = 1`
//! splits the problem: `Sigma'` minimizes the plain sum of squared
//! distances, and the total variance has the closed form
//! `C = (1/(nd)) sum_i d(y_i; x, Sigma')^2`.
//!
//! `Sigma'` is parametrized by the mean point, an eigenframe, and a single
//! log-eigenvalue `a` (`lambda' = (e^a, e^{-a})`), which keeps the unit
//! determinant and positivity by construction. Gradients of the squared
//! distances with respect to `(x, a, frame angle)` follow from first
//! variation of the path energy evaluated on the solved trajectories, so
//! each outer step needs no extra differentiation passes; per-sample
//! boundary problems are refined by a few warm-started solver steps per
//! outer update.
//!
//! For the unit sphere a reusable lattice of closed-form path endpoints
//! gives a cheap upper bound on the distances and a grid estimator that
//! needs no per-sample solves.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::development::Covariance;
use crate::error::{Error, Result};
use crate::geometry::{Frame, Manifold, Point};
use crate::shooting::{mpp_distance, shoot, ShootingProblem, ShootingResult};
use crate::surfaces::{pendulum_mpp, GroupFlow};

/// Validated sample collection.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub points: Vec<Point>,
}

impl SampleSet {
    pub fn new(m: &Manifold, points: Vec<Point>) -> Result<SampleSet> {
        if points.is_empty() {
            return Err(Error::EmptyInput("sample set must contain at least one point".into()));
        }
        for p in &points {
            m.check_point(p)?;
        }
        Ok(SampleSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Splits `Sigma = C Sigma'` with `det_g Sigma' = 1`:
/// `C = (det_g Sigma)^(1/d)`, `lambda'_i = lambda_i / sqrt(C)`.
pub fn decompose_scale(m: &Manifold, cov: &Covariance) -> Result<(f64, Covariance)> {
    let d = cov.dim() as f64;
    let c = cov.det_g().powf(1.0 / d);
    let unit = cov.scaled(1.0 / c)?;
    let _ = m;
    Ok((c, unit))
}

/// The sample objective `(1/2n) sum_i (d_i^2 + ln det_g Sigma)` with the
/// distances computed by boundary-value solves under `Sigma` itself.
pub fn objective(m: &Manifold, samples: &SampleSet, cov: &Covariance, step_count: usize) -> Result<f64> {
    let n = samples.len() as f64;
    let distances: Vec<f64> = samples
        .points
        .par_iter()
        .map(|y| mpp_distance(m, cov, y, step_count))
        .collect::<Result<Vec<f64>>>()?;
    let sum: f64 = distances.iter().map(|d| d * d).sum();
    Ok((sum + n * cov.det_g().ln()) / (2.0 * n))
}

#[derive(Clone, Debug)]
pub struct EstimationConfig {
    /// Horizon of the per-sample boundary problems (the distances do not
    /// depend on it).
    pub horizon: f64,
    pub step_count: usize,
    /// Gradient-norm threshold of the outer loop.
    pub outer_tolerance: f64,
    pub max_outer: usize,
    /// Warm-started solver steps per sample and outer update.
    pub inner_iters: usize,
    pub shoot_tolerance: f64,
    /// Floor on the total variance `C`, guarding the single-sample collapse.
    pub scale_floor: f64,
    /// Solver iterations for the initial (cold) per-sample solves.
    pub cold_iters: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            horizon: 1.0,
            step_count: 100,
            outer_tolerance: 1e-4,
            max_outer: 120,
            inner_iters: 4,
            shoot_tolerance: 1e-16,
            scale_floor: 1e-8,
            cold_iters: 120,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimationResult {
    pub mean: Point,
    /// The full covariance `Sigma = C Sigma'`.
    pub cov: Covariance,
    /// Total variance `C`.
    pub scale: f64,
    /// Value of the sample objective at the estimate.
    pub objective: f64,
    /// Final per-sample solves under the unit-determinant `Sigma'`.
    pub per_sample: Vec<ShootingResult>,
    /// Fraction of samples whose boundary problem converged.
    pub coverage: f64,
    pub outer_iterations: usize,
    pub notes: Vec<String>,
}

// State of the alternating estimator.
struct EstState {
    x: Point,
    frame: Frame,
    a: f64,
}

fn cov_of(m: &Manifold, st: &EstState) -> Result<(Covariance, bool)> {
    if st.a >= 0.0 {
        let cov = Covariance::new(m, st.frame.clone(), vec![st.a.exp(), (-st.a).exp()])?;
        Ok((cov, false))
    } else {
        // Swap the eigen-axes to keep the eigenvalues sorted.
        let cov = Covariance::new(
            m,
            st.frame.rotated(std::f64::consts::FRAC_PI_2),
            vec![(-st.a).exp(), st.a.exp()],
        )?;
        Ok((cov, true))
    }
}

/// Maps warm-start parameters between the unswapped and swapped solver
/// orientations: `(v1, v2, chi) -> (v2, -v1, chi)`.
fn swap_params(params: &[f64]) -> Vec<f64> {
    vec![params[1], -params[0], params[2]]
}

/// Moves a frame to a new base point by tangent projection and polar
/// re-orthonormalization (a retraction on the frame bundle).
fn retract_frame(m: &Manifold, frame: &Frame, x_new: &Point) -> Result<Frame> {
    let n = m.ambient_dim();
    let mut packed: Vec<f64> = Vec::with_capacity(2 * n);
    for v in frame.vectors() {
        packed.extend(v.iter().copied());
    }
    m.polar_fix_frame(x_new.coords().as_slice(), &mut packed);
    let vectors = (0..2)
        .map(|i| DVector::from_column_slice(&packed[n * i..n * (i + 1)]))
        .collect();
    Frame::new(m, x_new.clone(), vectors)
}

struct SampleSolve {
    result: ShootingResult,
    params: Vec<f64>,
}

fn solve_samples(
    m: &Manifold,
    samples: &SampleSet,
    cov: &Covariance,
    warms: &[Option<Vec<f64>>],
    cfg: &EstimationConfig,
    iters: usize,
) -> Result<Vec<SampleSolve>> {
    samples
        .points
        .par_iter()
        .zip(warms.par_iter())
        .map(|(y, warm)| {
            let mut problem = ShootingProblem::new(m.clone(), cov.clone(), y.clone(), cfg.horizon)?;
            problem.tolerance = cfg.shoot_tolerance;
            problem.step_count = cfg.step_count;
            let result = match warm {
                Some(params) => {
                    problem.max_iters = iters;
                    let v0 = DVector::from_column_slice(&params[..2]);
                    let chi0 = crate::dynamics::unpack_antisymmetric(
                        &DVector::from_column_slice(&params[2..]),
                        2,
                    );
                    shoot(&problem, Some((&v0, &chi0)))?
                }
                None => {
                    problem.max_iters = cfg.cold_iters;
                    shoot(&problem, None)?
                }
            };
            let mut params: Vec<f64> = result.v0.iter().copied().collect();
            params.extend(result.chi0_upper.iter().copied());
            Ok(SampleSolve { result, params })
        })
        .collect()
}

struct OuterEval {
    objective: f64,
    grad_a: f64,
    grad_phi: f64,
    grad_x: DVector<f64>,
    converged: usize,
    solves: Vec<SampleSolve>,
}

/// Objective `mean_i d_i'^2` and its gradient in `(a, phi, x)` from the
/// solved trajectories (first-variation formulas; exact at inner
/// convergence).
fn evaluate_outer(
    m: &Manifold,
    samples: &SampleSet,
    cov: &Covariance,
    swapped: bool,
    warms: &[Option<Vec<f64>>],
    cfg: &EstimationConfig,
    iters: usize,
) -> Result<OuterEval> {
    let solves = solve_samples(m, samples, cov, warms, cfg, iters)?;
    let horizon = cfg.horizon;
    let lambdas = cov.lambdas();
    let n_amb = m.ambient_dim();
    let mut objective = 0.0;
    let mut grad_a = 0.0;
    let mut grad_phi = 0.0;
    let mut grad_x = DVector::zeros(n_amb);
    let mut converged = 0;

    for s in &solves {
        if s.result.converged {
            converged += 1;
        }
        let c = s.result.weighted_speed(cov);
        objective += (c * horizon) * (c * horizon);

        let rec = &s.result.path;
        // d(d^2)/da = 2T int (v2^2/l2^2 - v1^2/l1^2) dt in the solver frame;
        // the axis swap flips the sign.
        let mut integral = 0.0;
        for k in 0..rec.times.len() - 1 {
            let h = rec.times[k + 1] - rec.times[k];
            let f = |v: &DVector<f64>| {
                (v[1] / lambdas[1]).powi(2) - (v[0] / lambdas[0]).powi(2)
            };
            integral += 0.5 * h * (f(&rec.velocities[k]) + f(&rec.velocities[k + 1]));
        }
        let da = 2.0 * horizon * integral;
        grad_a += if swapped { -da } else { da };

        // d(d^2)/dphi = 2T (chi12(T) - chi12(0)); in-plane rotations commute,
        // so the swap does not change the sign.
        let chi_first = rec.chis.first().map_or(0.0, |c| c[0]);
        let chi_last = rec.chis.last().map_or(0.0, |c| c[0]);
        grad_phi += 2.0 * horizon * (chi_last - chi_first);

        // grad_x d^2 = -2T sum_k f_k(0) v_k(0) / lambda_k^2.
        let v0 = &s.result.v0;
        for k in 0..2 {
            grad_x += cov.frame().vector(k) * (-2.0 * horizon * v0[k] / (lambdas[k] * lambdas[k]));
        }
    }
    let n = solves.len() as f64;
    objective /= n;
    grad_a /= n;
    grad_phi /= n;
    grad_x /= n;
    let mut gx = grad_x.as_slice().to_vec();
    m.project_tangent(cov.base().coords().as_slice(), &mut gx);
    Ok(OuterEval {
        objective,
        grad_a,
        grad_phi,
        grad_x: DVector::from_vec(gx),
        converged,
        solves,
    })
}

/// Tangent principal-component initialization: chordal mean projected to the
/// manifold, eigenframe and log-eigenvalue from the logarithm-map sample
/// covariance.
fn initial_state(m: &Manifold, samples: &SampleSet) -> Result<EstState> {
    let n_amb = m.ambient_dim();
    let mut mean = DVector::zeros(n_amb);
    for p in &samples.points {
        mean += p.coords();
    }
    mean /= samples.len() as f64;
    let x = m
        .project(mean)
        .or_else(|_| Ok::<Point, Error>(samples.points[0].clone()))?;
    let frame = m.canonical_frame(&x)?;

    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for p in &samples.points {
        let u = match m.log_map(&x, p) {
            Ok(u) => u,
            Err(_) => continue,
        };
        let w = frame.components(m, &u);
        sxx += w[0] * w[0];
        sxy += w[0] * w[1];
        syy += w[1] * w[1];
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let (e1, e2) = (0.5 * tr + disc, 0.5 * tr - disc);
    // Principal eigenvector of [[sxx, sxy], [sxy, syy]] is (sxy, e1 - sxx).
    let angle = if sxy.abs() < 1e-14 {
        if sxx >= syy {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2
        }
    } else {
        (e1 - sxx).atan2(sxy)
    };
    let a = if e2 > 1e-12 { 0.25 * (e1 / e2).ln() } else { 0.5 };
    Ok(EstState { x: x.clone(), frame: frame.rotated(angle), a: a.clamp(0.0, 2.0) })
}

/// Alternating mean/covariance estimation (surfaces and the plane, d = 2).
/// Returns the best iterate when the iteration budget is exhausted;
/// per-sample failures reduce `coverage` but do not abort.
pub fn estimate(
    m: &Manifold,
    samples: &SampleSet,
    init: Option<(Point, Covariance)>,
    cfg: &EstimationConfig,
) -> Result<EstimationResult> {
    if m.dim() != 2 {
        return Err(Error::Unsupported("estimation is implemented for two-dimensional manifolds".into()));
    }
    let n = samples.len();
    let mut notes = Vec::new();

    let mut state = match &init {
        Some((x, cov)) => {
            let (_, unit) = decompose_scale(m, cov)?;
            EstState {
                x: x.clone(),
                frame: unit.frame().clone(),
                a: unit.lambdas()[0].ln(),
            }
        }
        None => initial_state(m, samples)?,
    };

    let mut warms: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut swapped_prev = false;
    let mut step = 0.25_f64;
    let mut outer = 0;

    while outer < cfg.max_outer {
        let (cov, swapped) = cov_of(m, &state)?;
        if swapped != swapped_prev {
            for w in warms.iter_mut().flatten() {
                *w = swap_params(w);
            }
            swapped_prev = swapped;
        }
        let eval = evaluate_outer(m, samples, &cov, swapped, &warms, cfg, cfg.inner_iters)?;
        for (w, s) in warms.iter_mut().zip(&eval.solves) {
            *w = Some(s.params.clone());
        }
        let grad_norm = (eval.grad_a * eval.grad_a
            + eval.grad_phi * eval.grad_phi
            + eval.grad_x.norm_squared())
        .sqrt();
        let all_converged = eval.converged == n;
        let done = grad_norm <= cfg.outer_tolerance && all_converged;
        let obj0 = eval.objective;
        let (ga, gphi, gx) = (eval.grad_a, eval.grad_phi, eval.grad_x.clone());
        if done {
            break;
        }

        // Backtracking descent step on (a, phi, x).
        let mut accepted = false;
        let mut alpha = step;
        for _ in 0..8 {
            let a_new = state.a - alpha * ga;
            let x_new = match m.project(state.x.coords() - &gx * alpha) {
                Ok(p) => p,
                Err(_) => {
                    alpha *= 0.4;
                    continue;
                }
            };
            let frame_new = retract_frame(m, &state.frame, &x_new)?.rotated(-alpha * gphi);
            let cand = EstState { x: x_new, frame: frame_new, a: a_new };
            let (cov_c, swapped_c) = cov_of(m, &cand)?;
            let warms_c: Vec<Option<Vec<f64>>> = if swapped_c != swapped_prev {
                warms.iter().map(|w| w.as_ref().map(|p| swap_params(p))).collect()
            } else {
                warms.clone()
            };
            let eval_c =
                evaluate_outer(m, samples, &cov_c, swapped_c, &warms_c, cfg, cfg.inner_iters)?;
            if eval_c.objective
                <= obj0 - 1e-4 * alpha * grad_norm * grad_norm
            {
                state = cand;
                swapped_prev = swapped_c;
                warms = warms_c;
                for (w, s) in warms.iter_mut().zip(&eval_c.solves) {
                    *w = Some(s.params.clone());
                }
                step = (alpha * 1.6).min(2.0);
                accepted = true;
                break;
            }
            alpha *= 0.4;
        }
        outer += 1;
        if !accepted {
            notes.push(format!("line search stalled at outer iteration {outer}"));
            break;
        }
    }

    // Final tight solves under the unit-determinant covariance.
    let (cov_unit, _) = cov_of(m, &state)?;
    let final_solves = solve_samples(m, samples, &cov_unit, &warms, cfg, cfg.cold_iters)?;
    let converged: Vec<&SampleSolve> = final_solves.iter().filter(|s| s.result.converged).collect();
    let coverage = converged.len() as f64 / n as f64;
    if converged.is_empty() {
        return Err(Error::Numerical("no sample boundary problem converged".into()));
    }
    if coverage < 1.0 {
        notes.push(format!(
            "{} of {} samples did not converge; estimate uses the reachable subset",
            n - converged.len(),
            n
        ));
    }
    let d = 2.0;
    let sum_d2: f64 = converged
        .iter()
        .map(|s| {
            let c = s.result.weighted_speed(&cov_unit);
            (c * cfg.horizon) * (c * cfg.horizon)
        })
        .sum();
    let n_used = converged.len() as f64;
    let scale = (sum_d2 / (n_used * d)).max(cfg.scale_floor);
    let cov_full = cov_unit.scaled(scale)?;
    let objective = 0.5 * d * scale.ln() + sum_d2 / (2.0 * n_used * scale);

    Ok(EstimationResult {
        mean: state.x,
        cov: cov_full,
        scale,
        objective,
        per_sample: final_solves.into_iter().map(|s| s.result).collect(),
        coverage,
        outer_iterations: outer,
        notes,
    })
}

// ---------------------------------------------------------------------------
// Sphere lattice
// ---------------------------------------------------------------------------

/// One endpoint of a closed-form path on the unit sphere together with its
/// covariance-weighted travel time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeEntry {
    pub z: [f64; 3],
    pub travel_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeRow {
    /// Log-eigenvalue `a_l`; the row covariance has eigenvalues
    /// `(e^{2 a_l}, e^{-2 a_l})` at the north pole.
    pub a: f64,
    /// The time grid `T_{j,l} = (j / n_t) 2 pi e^{a_l}`, `j = 1..n_t`.
    pub t_values: Vec<f64>,
    /// Endpoints including the four mirror completions.
    pub entries: Vec<LatticeEntry>,
}

/// Reusable endpoint lattice on the unit sphere: rows over the anisotropy
/// grid, entries over initial angles, travel times and mirror reflections.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereLattice {
    pub a_max: f64,
    pub n_a: usize,
    pub n_psi: usize,
    pub n_t: usize,
    pub rows: Vec<LatticeRow>,
}

/// Builds the lattice by `(n_a + 1) * n_psi * n_t` SO(3) integrations of the
/// closed-form paths from the north pole; mirror endpoints are reflections,
/// not recomputed. Build once, reuse for any dataset.
pub fn build_s2_lattice(a_max: f64, n_a: usize, n_psi: usize, n_t: usize) -> Result<SphereLattice> {
    if !(a_max > 0.0) || n_a == 0 || n_psi == 0 || n_t == 0 {
        return Err(Error::InvalidArgument("lattice grid sizes must be positive".into()));
    }
    let rows: Vec<LatticeRow> = (0..=n_a)
        .into_par_iter()
        .map(|l| {
            let a = a_max * l as f64 / n_a as f64;
            let t_max = 2.0 * std::f64::consts::PI * a.exp();
            let t_values: Vec<f64> = (1..=n_t).map(|j| t_max * j as f64 / n_t as f64).collect();
            let mut entries = Vec::with_capacity(4 * n_psi * n_t);
            let lambdas = (a.exp(), (-a).exp());
            for i in 0..n_psi {
                let psi = std::f64::consts::PI * i as f64 / n_psi as f64;
                for &t in &t_values {
                    let Ok(cf) = pendulum_mpp(1.0, lambdas, psi, 1.0, t) else {
                        continue; // separatrix guard for very fine angle grids
                    };
                    let n_steps = ((t / 0.004) as usize).clamp(400, 12_000);
                    let sys = GroupFlow {
                        radius: 1.0,
                        lorentz: false,
                        velocity: |tt: f64| cf.velocity(tt),
                    };
                    let mut q = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
                    let h = t / n_steps as f64;
                    crate::ode::integrate_fixed(&sys, &mut q, 0.0, h, n_steps, |_, _, _| {});
                    let z = [q[2], q[5], q[8]];
                    for s1 in [1.0, -1.0] {
                        for s2 in [1.0, -1.0] {
                            entries.push(LatticeEntry {
                                z: [s1 * z[0], s2 * z[1], z[2]],
                                travel_time: t,
                            });
                        }
                    }
                }
            }
            LatticeRow { a, t_values, entries }
        })
        .collect();
    Ok(SphereLattice { a_max, n_a, n_psi, n_t, rows })
}

/// Upper bound on the covariance-weighted distance from the fiber of `y` to
/// the row-`l` covariance at the north pole:
/// `min over entries of (T + e^{a_l} acos(y . z))`. Ties break toward the
/// smaller travel time.
pub fn lattice_distance(lat: &SphereLattice, l: usize, y: &Point) -> Result<f64> {
    let row = lat
        .rows
        .get(l)
        .ok_or_else(|| Error::InvalidArgument(format!("row {l} out of range")))?;
    let yc = y.coords();
    let ea = row.a.exp();
    let mut best: Option<(f64, f64)> = None;
    for e in &row.entries {
        let dot = (yc[0] * e.z[0] + yc[1] * e.z[1] + yc[2] * e.z[2]).clamp(-1.0, 1.0);
        let value = e.travel_time + ea * dot.acos();
        let candidate = (value, e.travel_time);
        best = Some(match best {
            None => candidate,
            Some(cur) => {
                if value < cur.0 || (value == cur.0 && e.travel_time < cur.1) {
                    candidate
                } else {
                    cur
                }
            }
        });
    }
    Ok(best.expect("rows are never empty").0)
}

// Binary serialization: magic, grid sizes, then per row the log-eigenvalue,
// the time grid and the entries, all little-endian f64/u64. The layout is
// documented in the README.
const LATTICE_MAGIC: &[u8; 8] = b"MPPLAT01";

impl SphereLattice {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LATTICE_MAGIC);
        out.extend_from_slice(&(self.n_a as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_psi as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_t as u64).to_le_bytes());
        out.extend_from_slice(&self.a_max.to_le_bytes());
        for row in &self.rows {
            out.extend_from_slice(&row.a.to_le_bytes());
            out.extend_from_slice(&(row.t_values.len() as u64).to_le_bytes());
            for t in &row.t_values {
                out.extend_from_slice(&t.to_le_bytes());
            }
            out.extend_from_slice(&(row.entries.len() as u64).to_le_bytes());
            for e in &row.entries {
                for c in e.z {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                out.extend_from_slice(&e.travel_time.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SphereLattice> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Config("lattice file truncated".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        let magic = take(8)?;
        if magic != LATTICE_MAGIC {
            return Err(Error::Config("not a lattice file (bad magic)".into()));
        }
        let n_a = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let n_psi = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let n_t = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let a_max = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut rows = Vec::with_capacity(n_a + 1);
        for _ in 0..=n_a {
            let a = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let nt = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let mut t_values = Vec::with_capacity(nt);
            for _ in 0..nt {
                t_values.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            let ne = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let mut entries = Vec::with_capacity(ne);
            for _ in 0..ne {
                let mut z = [0.0; 3];
                for zc in z.iter_mut() {
                    *zc = f64::from_le_bytes(take(8)?.try_into().unwrap());
                }
                let travel_time = f64::from_le_bytes(take(8)?.try_into().unwrap());
                entries.push(LatticeEntry { z, travel_time });
            }
            rows.push(LatticeRow { a, t_values, entries });
        }
        Ok(SphereLattice { a_max, n_a, n_psi, n_t, rows })
    }
}

/// Grid estimator on the unit sphere: sweeps rotations `q` (Euler-angle
/// grid, optionally locally refined) and anisotropy rows, minimizing
/// `sum_r Dist_l(q^T y_r)^2`; the total variance then follows from the
/// closed form. Returns the induced mean `q N`, eigenframe `(q e1, q e2)`
/// and `Sigma = C Sigma'`.
pub fn estimate_s2(
    lat: &SphereLattice,
    samples: &SampleSet,
    grid: (usize, usize, usize),
    refine_rounds: usize,
) -> Result<EstimationResult> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("estimate_s2 needs samples".into()));
    }
    let m = Manifold::sphere(1.0)?;
    for p in &samples.points {
        m.check_point(p)?;
    }
    let (n1, n2, n3) = grid;
    if n1 == 0 || n2 == 0 || n3 == 0 {
        return Err(Error::InvalidArgument("rotation grid sizes must be positive".into()));
    }

    let cost = |l: usize, q: &[[f64; 3]; 3]| -> Result<f64> {
        let mut acc = 0.0;
        for y in &samples.points {
            let yc = y.coords();
            // q^T y
            let rotated = m.point(DVector::from_vec(vec![
                q[0][0] * yc[0] + q[1][0] * yc[1] + q[2][0] * yc[2],
                q[0][1] * yc[0] + q[1][1] * yc[1] + q[2][1] * yc[2],
                q[0][2] * yc[0] + q[1][2] * yc[1] + q[2][2] * yc[2],
            ]))?;
            let d = lattice_distance(lat, l, &rotated)?;
            acc += d * d;
        }
        Ok(acc)
    };

    let mut best: Option<(f64, usize, [f64; 3])> = None;
    let mut centers = [0.0_f64; 3];
    let mut spans = [std::f64::consts::TAU, std::f64::consts::TAU, std::f64::consts::TAU];
    for round in 0..=refine_rounds {
        let mut local_best: Option<(f64, usize, [f64; 3])> = None;
        for i in 0..n1 {
            for j in 0..n2 {
                for k in 0..n3 {
                    let angles = [
                        centers[0] + spans[0] * (i as f64 / n1 as f64 - 0.5),
                        centers[1] + spans[1] * (j as f64 / n2 as f64 - 0.5),
                        centers[2] + spans[2] * (k as f64 / n3 as f64 - 0.5),
                    ];
                    let q = euler_rotation(angles);
                    for l in 0..lat.rows.len() {
                        let c = cost(l, &q)?;
                        if local_best.map_or(true, |(b, _, _)| c < b) {
                            local_best = Some((c, l, angles));
                        }
                    }
                }
            }
        }
        best = local_best;
        if round < refine_rounds {
            let (_, _, angles) = best.unwrap();
            centers = angles;
            for s in spans.iter_mut() {
                *s *= 2.0 / n1.min(n2).min(n3) as f64;
            }
        }
    }
    let (best_cost, l_star, angles) = best.unwrap();
    let q = euler_rotation(angles);
    let row = &lat.rows[l_star];

    let mut notes = Vec::new();
    if l_star == lat.rows.len() - 1 && lat.rows.len() > 1 {
        notes.push("anisotropy argmin hit the a_max grid boundary".into());
    }

    let mean = m.point(DVector::from_vec(vec![q[0][2], q[1][2], q[2][2]]))?;
    let f1 = DVector::from_vec(vec![q[0][0], q[1][0], q[2][0]]);
    let f2 = DVector::from_vec(vec![q[0][1], q[1][1], q[2][1]]);
    let frame = Frame::new(&m, mean.clone(), vec![f1, f2])?;
    let unit = Covariance::new(&m, frame, vec![row.a.exp(), (-row.a).exp()])?;

    let n = samples.len() as f64;
    let d = 2.0;
    let scale = (best_cost / (n * d)).max(1e-8);
    let cov = unit.scaled(scale)?;
    let objective = 0.5 * d * scale.ln() + best_cost / (2.0 * n * scale);

    Ok(EstimationResult {
        mean,
        cov,
        scale,
        objective,
        per_sample: Vec::new(),
        coverage: 1.0,
        outer_iterations: 0,
        notes,
    })
}

fn euler_rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (c1, s1) = (angles[0].cos(), angles[0].sin());
    let (c2, s2) = (angles[1].cos(), angles[1].sin());
    let (c3, s3) = (angles[2].cos(), angles[2].sin());
    let rz = [[c1, -s1, 0.0], [s1, c1, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[c2, 0.0, s2], [0.0, 1.0, 0.0], [-s2, 0.0, c2]];
    let rx = [[1.0, 0.0, 0.0], [0.0, c3, -s3], [0.0, s3, c3]];
    let mul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    };
    mul(&mul(&rz, &ry), &rx)
}
