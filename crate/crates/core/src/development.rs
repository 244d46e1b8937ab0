//! Deterministic and stochastic development.
//!
//! A Euclidean path `b(t)` is rolled onto the manifold by feeding its
//! derivative through a parallel-transported frame: `xdot = f(t) bdot(t)`.
//! Driving the same construction with Brownian increments scaled by the
//! covariance square root yields the anisotropic diffusion whose time-`t`
//! law generalizes `N(x, t Sigma)` to curved spaces.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::geometry::{pack_frame_state, unpack_frame_state, Frame, FrameFlow, Manifold, Point};
use crate::ode::integrate_fixed;
use crate::path::PathRecord;

/// Points whose embedding norm exceeds this abort a stochastic rollout;
/// guards against runaway excursions on non-compact manifolds.
const MAX_RADIUS_GUARD: f64 = 1e8;

/// Anisotropic covariance `Sigma` stored as its orthonormal eigenframe and
/// the eigenvalue square roots `lambda_1 >= ... >= lambda_d > 0`, so that
/// `Sigma = sum_i lambda_i^2 f_i <f_i, .>_g`.
#[derive(Clone, Debug)]
pub struct Covariance {
    frame: Frame,
    lambdas: Vec<f64>,
}

impl Covariance {
    pub fn new(m: &Manifold, frame: Frame, lambdas: Vec<f64>) -> Result<Covariance> {
        if lambdas.len() != m.dim() {
            return Err(Error::InvalidArgument(format!(
                "need {} eigenvalues, got {}",
                m.dim(),
                lambdas.len()
            )));
        }
        if lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("eigenvalue square roots must be positive".into()));
        }
        if lambdas.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "eigenvalue square roots must be sorted descending".into(),
            ));
        }
        Ok(Covariance { frame, lambdas })
    }

    /// Isotropic covariance `lambda^2 g` with the canonical frame at `p`.
    pub fn isotropic(m: &Manifold, p: &Point, lambda: f64) -> Result<Covariance> {
        let frame = m.canonical_frame(p)?;
        Covariance::new(m, frame, vec![lambda; m.dim()])
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn base(&self) -> &Point {
        self.frame.base()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    /// Determinant of `Sigma` with respect to the metric: product of the
    /// eigenvalues `lambda_i^2`.
    pub fn det_g(&self) -> f64 {
        self.lambdas.iter().map(|l| l * l).product()
    }

    /// `Sigma -> C Sigma`, i.e. every `lambda_i` multiplied by `sqrt(C)`.
    pub fn scaled(&self, c: f64) -> Result<Covariance> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument("covariance scale must be positive".into()));
        }
        let s = c.sqrt();
        Ok(Covariance { frame: self.frame.clone(), lambdas: self.lambdas.iter().map(|l| l * s).collect() })
    }

    /// Applies `Sigma` to an ambient tangent vector.
    pub fn apply(&self, m: &Manifold, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(w.len());
        for (i, l) in self.lambdas.iter().enumerate() {
            let fi = &self.frame.vectors()[i];
            out += fi * (l * l * m.ip(fi.as_slice(), w.as_slice()));
        }
        out
    }

    /// Covariance-weighted speed `|Lambda^{-1} w|` of frame components `w`.
    pub fn weighted_speed(&self, w: &DVector<f64>) -> f64 {
        w.iter()
            .zip(&self.lambdas)
            .map(|(wi, l)| (wi / l) * (wi / l))
            .sum::<f64>()
            .sqrt()
    }
}

/// A Euclidean driving path sampled on a grid, `b(0) = 0`.
#[derive(Clone, Debug)]
pub struct EuclideanPath {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl EuclideanPath {
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<EuclideanPath> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(Error::InvalidArgument("path needs at least two matching samples".into()));
        }
        if times[0] != 0.0 || values[0].norm() != 0.0 {
            return Err(Error::InvalidArgument("driving path must start at b(0) = 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
        }
        Ok(EuclideanPath { times, values })
    }

    /// Straight line `t -> t w` sampled on a uniform grid.
    pub fn linear(w: &DVector<f64>, horizon: f64, n_steps: usize) -> Result<EuclideanPath> {
        if n_steps == 0 || horizon <= 0.0 {
            return Err(Error::InvalidArgument("need a positive horizon and at least one step".into()));
        }
        let times: Vec<f64> = (0..=n_steps).map(|k| horizon * k as f64 / n_steps as f64).collect();
        let values = times.iter().map(|&t| w * t).collect();
        EuclideanPath::new(times, values)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Polyline length, which is the exact length of the piecewise-linear
    /// interpolant.
    pub fn length(&self) -> f64 {
        self.values.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }
}

/// Rolls a Euclidean path onto the manifold through the parallel frame
/// starting at `f0`. One RK4 step per path interval with the interval's
/// constant slope; the Riemannian length of the result equals the Euclidean
/// length of `b`.
pub fn develop(m: &Manifold, f0: &Frame, b: &EuclideanPath) -> Result<PathRecord> {
    if b.dim() != m.dim() {
        return Err(Error::InvalidArgument(format!(
            "driving path dimension {} does not match manifold dimension {}",
            b.dim(),
            m.dim()
        )));
    }
    let mut state = pack_frame_state::<f64>(f0.base(), f0);
    let mut record = RecordBuilder::new(m, f0, b.times.len());
    let mut slope = DVector::zeros(b.dim());

    for k in 0..b.times.len() - 1 {
        let h = b.times[k + 1] - b.times[k];
        slope = (&b.values[k + 1] - &b.values[k]) / h;
        record.push(b.times[k], &state, &slope);
        let sys = FrameFlow {
            manifold: m,
            control: |_t: f64, out: &mut [f64]| out.copy_from_slice(slope.as_slice()),
        };
        integrate_fixed(&sys, &mut state, b.times[k], h, 1, |_, _, _| {});
    }
    record.push(*b.times.last().unwrap(), &state, &slope);
    record.finish(m, &state)
}

/// Development of the straight line `t -> t w`: the constant-speed geodesic
/// when the frame is orthonormal.
pub fn develop_linear(
    m: &Manifold,
    f0: &Frame,
    w: &DVector<f64>,
    horizon: f64,
    n_steps: usize,
) -> Result<PathRecord> {
    let b = EuclideanPath::linear(w, horizon, n_steps)?;
    develop(m, f0, &b)
}

/// Inverts [`develop`]: recovers the Euclidean driving path of a manifold
/// curve given the initial frame. Each increment is solved by Newton
/// iteration so that the forward development step reproduces the curve node
/// exactly; round trips in both directions close to solver precision.
pub fn anti_develop(m: &Manifold, f0: &Frame, gamma: &PathRecord) -> Result<EuclideanPath> {
    let d = m.dim();
    if gamma.len() < 2 {
        return Err(Error::EmptyInput("path must contain at least two nodes".into()));
    }
    if gamma.start().chord_distance(f0.base()) > 1e-8 {
        return Err(Error::InvalidArgument("path must start at the frame's base point".into()));
    }
    for p in &gamma.points {
        let res = m.point_residual(p.as_slice());
        if res > 1e-8 {
            return Err(Error::OffManifold { residual: res, tolerance: 1e-8 });
        }
    }

    let mut state = pack_frame_state::<f64>(f0.base(), f0);
    let mut values = Vec::with_capacity(gamma.len());
    let mut b = DVector::zeros(d);
    values.push(b.clone());

    for k in 0..gamma.len() - 1 {
        let h = gamma.times[k + 1] - gamma.times[k];
        let target = &gamma.points[k + 1];
        let delta = solve_increment(m, &state, target, h)?;
        // Advance with the exact forward step so the recovered path is a
        // true right inverse of `develop`.
        let sys = FrameFlow {
            manifold: m,
            control: |_t: f64, out: &mut [f64]| {
                for (o, di) in out.iter_mut().zip(delta.iter()) {
                    *o = di / h;
                }
            },
        };
        integrate_fixed(&sys, &mut state, gamma.times[k], h, 1, |_, _, _| {});
        b += &delta;
        values.push(b.clone());
    }
    EuclideanPath::new(gamma.times.clone(), values)
}

/// Solves for the increment `delta` so that one forward development step of
/// size `h` from `state` lands on `target`.
fn solve_increment(m: &Manifold, state: &[f64], target: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let n = m.ambient_dim();
    let d = m.dim();
    // Chord components in the current frame as the initial guess.
    let x = &state[..n];
    let mut chord: Vec<f64> = (0..n).map(|i| target[i] - x[i]).collect();
    m.project_tangent(x, &mut chord);
    let mut delta = DVector::from_iterator(
        d,
        (0..d).map(|i| {
            let fi = &state[n * (1 + i)..n * (2 + i)];
            m.ip(fi, &chord)
        }),
    );
    if matches!(m, Manifold::Euclidean { .. }) {
        return Ok(delta);
    }
    debug_assert_eq!(d, 2);

    let scale = delta.norm().max(1e-9);
    for _ in 0..12 {
        let mut y: Vec<Dual<2>> = state.iter().map(|&s| Dual::constant(s)).collect();
        let w = [Dual::<2>::seeded(delta[0], 0), Dual::<2>::seeded(delta[1], 1)];
        let sys = FrameFlow {
            manifold: m,
            control: |_t: f64, out: &mut [Dual<2>]| {
                out[0] = w[0].scale(1.0 / h);
                out[1] = w[1].scale(1.0 / h);
            },
        };
        integrate_fixed(&sys, &mut y, 0.0, h, 1, |_, _, _| {});
        // Residual in the frame at the step start (2 equations).
        let mut r = [0.0; 2];
        let mut jac = [[0.0; 2]; 2];
        for eq in 0..2 {
            let fi = &state[n * (1 + eq)..n * (2 + eq)];
            let sig = m.signature();
            for c in 0..n {
                let diff = y[c] - Dual::constant(target[c]);
                r[eq] += sig[c] * fi[c] * diff.re;
                jac[eq][0] += sig[c] * fi[c] * diff.dx[0];
                jac[eq][1] += sig[c] * fi[c] * diff.dx[1];
            }
        }
        let rn = (r[0] * r[0] + r[1] * r[1]).sqrt();
        if rn < 1e-13 * scale.max(1.0) {
            return Ok(delta);
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-14 {
            return Err(Error::Numerical("singular Jacobian while inverting development".into()));
        }
        delta[0] -= (jac[1][1] * r[0] - jac[0][1] * r[1]) / det;
        delta[1] -= (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det;
    }
    Err(Error::Numerical("development increment Newton did not converge".into()))
}

struct RecordBuilder {
    times: Vec<f64>,
    points: Vec<DVector<f64>>,
    velocities: Vec<DVector<f64>>,
    chis: Vec<DVector<f64>>,
    speeds: Vec<f64>,
    energies: Vec<f64>,
    initial_frame: Frame,
    ambient: usize,
}

impl RecordBuilder {
    fn new(m: &Manifold, f0: &Frame, capacity: usize) -> RecordBuilder {
        RecordBuilder {
            times: Vec::with_capacity(capacity),
            points: Vec::with_capacity(capacity),
            velocities: Vec::with_capacity(capacity),
            chis: Vec::with_capacity(capacity),
            speeds: Vec::with_capacity(capacity),
            energies: Vec::with_capacity(capacity),
            initial_frame: f0.clone(),
            ambient: m.ambient_dim(),
        }
    }

    fn push(&mut self, t: f64, state: &[f64], v: &DVector<f64>) {
        let speed = v.norm();
        let energy = match (self.times.last(), self.speeds.last(), self.energies.last()) {
            (Some(&tp), Some(&sp), Some(&ep)) => {
                ep + 0.25 * (sp * sp + speed * speed) * (t - tp)
            }
            _ => 0.0,
        };
        self.times.push(t);
        self.points.push(DVector::from_column_slice(&state[..self.ambient]));
        self.velocities.push(v.clone());
        self.chis.push(DVector::zeros(0));
        self.speeds.push(speed);
        self.energies.push(energy);
    }

    fn finish(self, m: &Manifold, state: &[f64]) -> Result<PathRecord> {
        let (_, final_frame) = unpack_frame_state(m, state)?;
        Ok(PathRecord {
            times: self.times,
            points: self.points,
            velocities: self.velocities,
            chis: self.chis,
            speeds: self.speeds,
            energies: self.energies,
            initial_frame: self.initial_frame,
            final_frame,
        })
    }
}

// ---------------------------------------------------------------------------
// Stochastic development
// ---------------------------------------------------------------------------

/// One Stratonovich-Heun step of the development SDE: predictor-corrector on
/// the coupled (point, frame) state with tangent increment `f * w`, followed
/// by drift control.
fn heun_step(m: &Manifold, state: &mut [f64], w: &[f64], polar: bool) {
    let n = m.ambient_dim();
    let d = m.dim();
    let len = state.len();
    let mut g0 = vec![0.0; len];
    development_field(m, state, w, &mut g0);
    let mut predictor = vec![0.0; len];
    for i in 0..len {
        predictor[i] = state[i] + g0[i];
    }
    let mut g1 = vec![0.0; len];
    development_field(m, &predictor, w, &mut g1);
    for i in 0..len {
        state[i] += 0.5 * (g0[i] + g1[i]);
    }
    let (x, f) = state.split_at_mut(n);
    m.project_point(x);
    if polar {
        m.polar_fix_frame(x, f);
    } else {
        for i in 0..d {
            m.project_tangent(x, &mut f[n * i..n * (i + 1)]);
        }
    }
}

/// The development vector field applied to the increment `w` (frame
/// components): point moves by `f w`, frame moves by the transport term.
fn development_field(m: &Manifold, state: &[f64], w: &[f64], out: &mut [f64]) {
    let n = m.ambient_dim();
    let d = m.dim();
    let x = &state[..n];
    for c in 0..n {
        let mut acc = 0.0;
        for i in 0..d {
            acc += state[n * (1 + i) + c] * w[i];
        }
        out[c] = acc;
    }
    let (xdot, rest) = out.split_at_mut(n);
    for i in 0..d {
        let fi = &state[n * (1 + i)..n * (2 + i)];
        m.transport_rhs(x, xdot, fi, &mut rest[n * i..n * (i + 1)]);
    }
}

/// Rolls one Brownian path through the frame with per-step increments
/// `scale * dB`. `scale` is a d x d matrix (diagonal `Lambda` in the
/// eigenframe construction). Returns the endpoint state.
fn rollout(
    m: &Manifold,
    f0_state: &[f64],
    scale: &DMatrix<f64>,
    t: f64,
    n_steps: usize,
    rng: &mut ChaCha12Rng,
    polar: bool,
) -> Result<Vec<f64>> {
    let d = m.dim();
    let h = t / n_steps as f64;
    let sqrt_h = h.sqrt();
    let mut state = f0_state.to_vec();
    let mut db = vec![0.0; d];
    let mut w = vec![0.0; d];
    for _ in 0..n_steps {
        for dbi in db.iter_mut() {
            *dbi = rng.sample::<f64, _>(StandardNormal) * sqrt_h;
        }
        for i in 0..d {
            w[i] = (0..d).map(|j| scale[(i, j)] * db[j]).sum();
        }
        heun_step(m, &mut state, &w, polar);
        let r2: f64 = state[..m.ambient_dim()].iter().map(|c| c * c).sum();
        if !r2.is_finite() || r2 > MAX_RADIUS_GUARD * MAX_RADIUS_GUARD {
            return Err(Error::Numerical(
                "stochastic rollout left the maximum-radius guard region".into(),
            ));
        }
    }
    Ok(state)
}

/// Draws `n_samples` points of the anisotropic diffusion `N(x, t Sigma)` by
/// stochastic development. Deterministic for a fixed seed: sample `i` uses
/// the stream `(seed, i)` of a counter-based generator, so results do not
/// depend on thread scheduling.
pub fn sample_anisotropic(
    m: &Manifold,
    cov: &Covariance,
    t: f64,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Point>> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument("time horizon must be positive".into()));
    }
    let d = m.dim();
    let state0 = pack_frame_state::<f64>(cov.base(), cov.frame());
    let scale = DMatrix::from_fn(d, d, |i, j| if i == j { cov.lambdas()[i] } else { 0.0 });
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let state = rollout(m, &state0, &scale, t, n_steps, &mut rng, true)?;
            m.point(DVector::from_column_slice(&state[..m.ambient_dim()]))
        })
        .collect()
}

/// A general (not necessarily orthonormal) frame: an invertible set of
/// tangent vectors at a point, encoding a covariance through its Gram
/// matrix.
#[derive(Clone, Debug)]
pub struct LinearFrame {
    pub base: Point,
    pub vectors: Vec<DVector<f64>>,
}

impl LinearFrame {
    pub fn new(m: &Manifold, base: Point, vectors: Vec<DVector<f64>>) -> Result<LinearFrame> {
        m.check_point(&base)?;
        if vectors.len() != m.dim() {
            return Err(Error::InvalidArgument(format!(
                "need {} frame vectors, got {}",
                m.dim(),
                vectors.len()
            )));
        }
        let x = base.coords.as_slice();
        for v in &vectors {
            let mut t = v.clone();
            m.project_tangent(x, t.as_mut_slice());
            if (&t - v).norm() > 1e-9 {
                return Err(Error::InvalidArgument("frame vectors must be tangent".into()));
            }
        }
        Ok(LinearFrame { base, vectors })
    }

    /// Gram matrix `<u_i, u_j>_g`; its square root is the `S` map of the
    /// frame.
    pub fn gram(&self, m: &Manifold) -> DMatrix<f64> {
        let d = self.vectors.len();
        DMatrix::from_fn(d, d, |i, j| m.ip(self.vectors[i].as_slice(), self.vectors[j].as_slice()))
    }
}

/// Symmetric positive square root via the eigendecomposition.
fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = a.nrows();
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d {
        let v = eig.eigenvectors.column(k);
        out += v * v.transpose() * eig.eigenvalues[k].max(0.0).sqrt();
    }
    out
}

/// Runs the two constructions of the anisotropic diffusion on matched noise:
/// development through the general frame `u`, and development through the
/// orthonormalized frame `u S^{-1}` with increments pre-multiplied by `S`.
/// Returns the max pointwise deviation of the endpoint coordinates over all
/// samples; the two recursions are algebraically identical, so the result is
/// at numerical noise level.
pub fn development_equivalence_gap(
    m: &Manifold,
    u: &LinearFrame,
    t: f64,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let d = m.dim();
    let n = m.ambient_dim();
    let gram = u.gram(m);
    let s = sym_sqrt(&gram);
    let s_inv = s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("frame is not invertible".into()))?;

    // Orthonormalized frame f_j = sum_i u_i (S^{-1})_ij.
    let f_vectors: Vec<DVector<f64>> = (0..d)
        .map(|j| {
            let mut acc = DVector::zeros(n);
            for i in 0..d {
                acc += &u.vectors[i] * s_inv[(i, j)];
            }
            acc
        })
        .collect();
    let f = Frame::new(m, u.base.clone(), f_vectors)?;

    let mut state_u0 = Vec::with_capacity(n * (1 + d));
    state_u0.extend(u.base.coords.iter().copied());
    for v in &u.vectors {
        state_u0.extend(v.iter().copied());
    }
    let state_f0 = pack_frame_state::<f64>(&u.base, &f);
    let identity = DMatrix::identity(d, d);

    let gap = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng_a = ChaCha12Rng::seed_from_u64(seed);
            rng_a.set_stream(i as u64);
            let mut rng_b = rng_a.clone();
            let end_u = rollout(m, &state_u0, &identity, t, n_steps, &mut rng_a, false)?;
            let end_f = rollout(m, &state_f0, &s, t, n_steps, &mut rng_b, false)?;
            let mut worst: f64 = 0.0;
            for c in 0..n {
                worst = worst.max((end_u[c] - end_f[c]).abs());
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gap.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Manifold;

    fn sphere() -> Manifold {
        Manifold::sphere(1.0).unwrap()
    }

    #[test]
    fn develop_on_flat_space_is_translation() {
        let m = Manifold::euclidean(2).unwrap();
        let p = m.point(DVector::from_vec(vec![0.3, -0.4])).unwrap();
        let f = m.canonical_frame(&p).unwrap();
        let times: Vec<f64> = (0..=50).map(|k| k as f64 / 50.0).collect();
        let values: Vec<DVector<f64>> = times
            .iter()
            .map(|&t| DVector::from_vec(vec![t * t, (2.0 * t).sin()]))
            .collect();
        let b = EuclideanPath::new(times, values.clone()).unwrap();
        let rec = develop(&m, &f, &b).unwrap();
        for (k, v) in values.iter().enumerate() {
            let expected = &p.coords().clone() + v;
            assert!((&rec.points[k] - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn straight_line_develops_to_great_circle() {
        let m = sphere();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let rec = develop_linear(&m, &f, &DVector::from_vec(vec![1.0, 0.0]), std::f64::consts::PI, 2000)
            .unwrap();
        // Unit-speed great circle reaches the antipode at T = pi.
        let anti = -p.coords();
        assert!((rec.endpoint().coords() - anti).norm() < 1e-8);
        // Stays on a great circle through p with tangent f_1.
        let f1 = f.vector(0);
        for (k, x) in rec.points.iter().enumerate() {
            let t = rec.times[k];
            let expected = p.coords() * t.cos() + &f1 * t.sin();
            assert!((x - expected).norm() < 1e-8, "deviation at t={t}");
        }
    }

    #[test]
    fn round_trip_zigzag_on_sphere() {
        let m = sphere();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let n = 800;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * 1e-3).collect();
        let values: Vec<DVector<f64>> = times
            .iter()
            .map(|&t| DVector::from_vec(vec![(7.0 * t).sin() * 0.5 + 0.8 * t, (3.0 * t).cos() - 1.0]))
            .collect();
        let b = EuclideanPath::new(times, values).unwrap();
        let gamma = develop(&m, &f, &b).unwrap();
        let b2 = anti_develop(&m, &f, &gamma).unwrap();
        let sup = b
            .values
            .iter()
            .zip(&b2.values)
            .map(|(u, v)| (u - v).norm())
            .fold(0.0, f64::max);
        assert!(sup < 1e-6, "anti-development round trip sup {sup}");
        // And the reverse composition.
        let gamma2 = develop(&m, &f, &b2).unwrap();
        let sup2 = gamma.max_pointwise_distance(&gamma2).unwrap();
        assert!(sup2 < 1e-9, "development round trip sup {sup2}");
    }

    #[test]
    fn round_trip_on_torus() {
        let m = Manifold::torus(2.0, 1.0).unwrap();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let n = 600;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * 1e-3).collect();
        let values: Vec<DVector<f64>> = times
            .iter()
            .map(|&t| DVector::from_vec(vec![t + 0.2 * (5.0 * t).sin(), 0.7 * t]))
            .collect();
        let b = EuclideanPath::new(times, values).unwrap();
        let gamma = develop(&m, &f, &b).unwrap();
        let b2 = anti_develop(&m, &f, &gamma).unwrap();
        let sup = b
            .values
            .iter()
            .zip(&b2.values)
            .map(|(u, v)| (u - v).norm())
            .fold(0.0, f64::max);
        assert!(sup < 1e-6, "torus round trip sup {sup}");
    }

    #[test]
    fn geodesic_anti_develops_to_straight_line() {
        let m = sphere();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let w = DVector::from_vec(vec![0.6, 0.8]);
        let gamma = develop_linear(&m, &f, &w, 1.5, 1500).unwrap();
        let b = anti_develop(&m, &f, &gamma).unwrap();
        for (k, t) in b.times.iter().enumerate() {
            assert!((&b.values[k] - &w * *t).norm() < 1e-8);
        }
    }

    #[test]
    fn length_isometry() {
        // Each interval of the development of a piecewise-linear path is a
        // geodesic arc, so on the unit sphere the interval arc length is
        // exactly 2 asin(chord / 2); the summed arcs must reproduce the
        // Euclidean polyline length.
        let m = sphere();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let n = 2000;
        let times: Vec<f64> = (0..=n).map(|k| 2.0 * k as f64 / n as f64).collect();
        let values: Vec<DVector<f64>> = times
            .iter()
            .map(|&t| DVector::from_vec(vec![(3.0 * t).sin(), t]))
            .collect();
        let b = EuclideanPath::new(times, values).unwrap();
        let gamma = develop(&m, &f, &b).unwrap();
        let arc: f64 = gamma
            .points
            .windows(2)
            .map(|w| 2.0 * (0.5 * (&w[1] - &w[0]).norm()).asin())
            .sum();
        assert!((arc - b.length()).abs() < 1e-6, "arc {arc} vs euclidean {}", b.length());
    }

    #[test]
    fn vanishing_covariance_concentrates_samples() {
        let m = sphere();
        let cov = Covariance::isotropic(&m, &m.base_point(), 1e-6).unwrap();
        let pts = sample_anisotropic(&m, &cov, 1.0, 50, 200, 7).unwrap();
        for q in pts {
            assert!(q.chord_distance(&m.base_point()) < 1e-3);
        }
    }

    #[test]
    fn flat_sample_covariance_matches() {
        let m = Manifold::euclidean(2).unwrap();
        let p = m.base_point();
        let frame = m.canonical_frame(&p).unwrap();
        let cov = Covariance::new(&m, frame, vec![2.0, 1.0]).unwrap();
        let n = 10_000;
        let pts = sample_anisotropic(&m, &cov, 1.0, 1, n, 1234).unwrap();
        let mut s = [0.0_f64; 3]; // xx, yy, xy
        for q in &pts {
            s[0] += q.coords()[0] * q.coords()[0];
            s[1] += q.coords()[1] * q.coords()[1];
            s[2] += q.coords()[0] * q.coords()[1];
        }
        let (xx, yy, xy) = (s[0] / n as f64, s[1] / n as f64, s[2] / n as f64);
        // Var(x) = 4, Var(y) = 1; allow 3 standard errors.
        let se_xx = 4.0 * (2.0 / n as f64).sqrt();
        let se_yy = 1.0 * (2.0 / n as f64).sqrt();
        let se_xy = (4.0 / n as f64).sqrt();
        assert!((xx - 4.0).abs() < 3.0 * se_xx, "xx {xx}");
        assert!((yy - 1.0).abs() < 3.0 * se_yy, "yy {yy}");
        assert!(xy.abs() < 3.0 * se_xy, "xy {xy}");
    }

    #[test]
    fn small_time_squared_distance_moment_on_sphere() {
        // Radial moment oracle: for the unit sphere, E[d^2] = 2t - t^2/3 + O(t^3)
        // (generator Delta/2; Delta r^2 = 4 - (2/3) r^2 + O(r^4), so
        // m'(t) = 2 - m/3 up to higher order).
        let m = sphere();
        let p = m.base_point();
        let cov = Covariance::isotropic(&m, &p, 1.0).unwrap();
        let t = 0.1;
        let n = 100_000;
        let pts = sample_anisotropic(&m, &cov, t, 60, n, 99).unwrap();
        let d2: Vec<f64> = pts
            .iter()
            .map(|q| {
                let c = (p.coords().dot(q.coords())).clamp(-1.0, 1.0);
                let d = c.acos();
                d * d
            })
            .collect();
        let mean = d2.iter().sum::<f64>() / n as f64;
        let var = d2.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let expected = 2.0 * t - t * t / 3.0;
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean {mean} vs {expected} (3 se = {})",
            3.0 * se
        );
    }

    #[test]
    fn general_frame_equivalence() {
        let m = sphere();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        // Skewed, non-orthonormal frame.
        let u1 = f.vector(0) * 1.5 + f.vector(1) * 0.4;
        let u2 = f.vector(1) * 0.8;
        let u = LinearFrame::new(&m, p, vec![u1, u2]).unwrap();
        let gap = development_equivalence_gap(&m, &u, 1.0, 100, 100, 31).unwrap();
        assert!(gap <= 1e-8, "equivalence gap {gap}");
    }

    #[test]
    fn general_frame_equivalence_on_torus() {
        let m = Manifold::torus(2.0, 1.0).unwrap();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let u1 = f.vector(0) * 0.9 - f.vector(1) * 0.3;
        let u2 = f.vector(0) * 0.2 + f.vector(1) * 1.7;
        let u = LinearFrame::new(&m, p, vec![u1, u2]).unwrap();
        let gap = development_equivalence_gap(&m, &u, 0.5, 80, 50, 5).unwrap();
        assert!(gap <= 1e-8, "equivalence gap {gap}");
    }

    #[test]
    fn euclidean_general_frame_equivalence_is_exact() {
        let m = Manifold::euclidean(2).unwrap();
        let p = m.base_point();
        let u = LinearFrame::new(
            &m,
            p,
            vec![DVector::from_vec(vec![2.0, 0.3]), DVector::from_vec(vec![-0.1, 0.9])],
        )
        .unwrap();
        let gap = development_equivalence_gap(&m, &u, 1.0, 64, 50, 11).unwrap();
        assert!(gap <= 1e-12, "flat equivalence gap {gap}");
    }

    #[test]
    fn rotated_frame_with_matched_noise_gives_identical_samples() {
        // Rotating the frame by q and the increments by q^T leaves the
        // development unchanged; with matched noise the runs are identical.
        let m = sphere();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        let angle = 0.77;
        let g = f.rotated(angle);
        let lambdas = [1.7, 0.6];
        let (c, s) = (angle.cos(), angle.sin());

        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let state_f = pack_frame_state::<f64>(&p, &f);
        let state_g = pack_frame_state::<f64>(&p, &g);
        let h = 0.01;
        let mut sf = state_f.clone();
        let mut sg = state_g.clone();
        for _ in 0..100 {
            let db = [
                rng.sample::<f64, _>(StandardNormal) * h.sqrt(),
                rng.sample::<f64, _>(StandardNormal) * h.sqrt(),
            ];
            // Components of the same tangent increment in the two frames:
            // w for frame f, q^T w for the rotated frame f q.
            let w = [lambdas[0] * db[0], lambdas[1] * db[1]];
            let wq = [c * w[0] + s * w[1], -s * w[0] + c * w[1]];
            heun_step(&m, &mut sf, &w, true);
            heun_step(&m, &mut sg, &wq, true);
            // The lambda scaling is applied in the f frame in both runs, so
            // the *tangent* increments match exactly.
            for i in 0..3 {
                assert!((sf[i] - sg[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn covariance_validation() {
        let m = sphere();
        let p = m.base_point();
        let f = m.canonical_frame(&p).unwrap();
        assert!(Covariance::new(&m, f.clone(), vec![1.0, 2.0]).is_err());
        assert!(Covariance::new(&m, f.clone(), vec![1.0, -1.0]).is_err());
        assert!(Covariance::new(&m, f.clone(), vec![2.0, 1.0]).is_ok());
        let cov = Covariance::new(&m, f, vec![2.0, 1.0]).unwrap();
        assert!((cov.det_g() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn euclidean_path_validation() {
        let t = vec![0.0, 0.1, 0.1];
        let v = vec![DVector::zeros(2); 3];
        assert!(EuclideanPath::new(t, v).is_err());
        let t = vec![0.1, 0.2];
        let v = vec![DVector::zeros(2); 2];
        assert!(EuclideanPath::new(t, v).is_err());
    }
}
