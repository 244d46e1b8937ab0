//! Built-in geometries and frame transport.
//!
//! Points and tangent vectors live in embedding coordinates: the sphere and
//! the torus in R^3, the hyperbolic plane as the upper sheet of the
//! hyperboloid in R^{2,1} (signature `(+,+,-)`), and flat space in R^d.
//! Working in the embedding avoids chart-boundary singularities and makes
//! parallel transport an explicit linear ODE driven by the shape term of the
//! hypersurface.
//!
//! Frames are orthonormal and, by convention, right-handed; the sign of the
//! antisymmetric state `chi` carried by the path dynamics flips under
//! orientation reversal of the frame.
//!
//! Everything needed inside integration loops is generic over [`Real`] so
//! the same kernels propagate dual-number sensitivities.

use nalgebra::{DMatrix, DVector};

use crate::dual::{dot, dot_sig, Dual, Real};
use crate::error::{Error, Result};
use crate::ode::{integrate_fixed, OdeSystem};
use crate::path::PathRecord;

/// Residual tolerance for on-manifold and frame validation.
pub const GEOM_TOL: f64 = 1e-10;

const EUCLIDEAN_SIG: [f64; 8] = [1.0; 8];
const LORENTZ_SIG: [f64; 3] = [1.0, 1.0, -1.0];

/// One of the built-in manifolds.
#[derive(Clone, Debug, PartialEq)]
pub enum Manifold {
    /// Sphere of the given radius embedded in R^3.
    Sphere { radius: f64 },
    /// Hyperbolic plane of curvature `-1/radius^2`, upper hyperboloid sheet
    /// `<x,x> = -radius^2` in R^{2,1}.
    Hyperbolic { radius: f64 },
    /// Torus of revolution about the z-axis: ring radius `R`, tube radius
    /// `a < R`.
    Torus { ring_radius: f64, tube_radius: f64 },
    /// Flat R^d.
    Euclidean { dim: usize },
}

impl Manifold {
    pub fn sphere(radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::InvalidArgument("sphere radius must be positive".into()));
        }
        Ok(Manifold::Sphere { radius })
    }

    pub fn hyperbolic(radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::InvalidArgument("hyperbolic radius must be positive".into()));
        }
        Ok(Manifold::Hyperbolic { radius })
    }

    pub fn torus(ring_radius: f64, tube_radius: f64) -> Result<Self> {
        if ring_radius <= 0.0 || tube_radius <= 0.0 || tube_radius >= ring_radius {
            return Err(Error::InvalidArgument(
                "torus requires 0 < tube radius < ring radius".into(),
            ));
        }
        Ok(Manifold::Torus { ring_radius, tube_radius })
    }

    pub fn euclidean(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("euclidean dimension must be positive".into()));
        }
        Ok(Manifold::Euclidean { dim })
    }

    /// Intrinsic dimension.
    pub fn dim(&self) -> usize {
        match self {
            Manifold::Euclidean { dim } => *dim,
            _ => 2,
        }
    }

    /// Dimension of the embedding space.
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean { dim } => *dim,
            _ => 3,
        }
    }

    /// Number of strict-upper-triangle entries of an antisymmetric d x d
    /// matrix, the storage size of `chi`.
    pub fn chi_dim(&self) -> usize {
        let d = self.dim();
        d * (d - 1) / 2
    }

    /// Diagonal signature of the ambient (pseudo-)inner product.
    pub(crate) fn signature(&self) -> &'static [f64] {
        match self {
            Manifold::Hyperbolic { .. } => &LORENTZ_SIG,
            _ => &EUCLIDEAN_SIG[..self.ambient_dim()],
        }
    }

    /// Ambient inner product; restricted to tangent spaces this is the
    /// Riemannian metric.
    pub(crate) fn ip<S: Real>(&self, a: &[S], b: &[S]) -> S {
        match self {
            Manifold::Hyperbolic { .. } => dot_sig(&LORENTZ_SIG, a, b),
            _ => dot(a, b),
        }
    }

    /// Constraint residual of the defining equation, zero on the manifold.
    pub(crate) fn point_residual<S: Real>(&self, x: &[S]) -> S {
        match self {
            Manifold::Sphere { radius } => (dot(x, x) - S::from_f64(radius * radius)).abs(),
            Manifold::Hyperbolic { radius } => {
                (dot_sig(&LORENTZ_SIG, x, x) + S::from_f64(radius * radius)).abs()
            }
            Manifold::Torus { ring_radius, tube_radius } => {
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let dr = rho - S::from_f64(*ring_radius);
                (dr * dr + x[2] * x[2] - S::from_f64(tube_radius * tube_radius)).abs()
            }
            Manifold::Euclidean { .. } => S::zero(),
        }
    }

    /// Nearest-point style projection onto the manifold (exact for all four
    /// built-ins). Used as per-step drift control.
    pub(crate) fn project_point<S: Real>(&self, x: &mut [S]) {
        match self {
            Manifold::Sphere { radius } => {
                let s = S::from_f64(*radius) / dot(x, x).sqrt();
                for xi in x.iter_mut() {
                    *xi = *xi * s;
                }
            }
            Manifold::Hyperbolic { radius } => {
                let q = -dot_sig(&LORENTZ_SIG, x, x);
                let s = S::from_f64(*radius) / q.sqrt();
                for xi in x.iter_mut() {
                    *xi = *xi * s;
                }
            }
            Manifold::Torus { ring_radius, tube_radius } => {
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let cs = S::from_f64(*ring_radius) / rho;
                let (cx, cy) = (x[0] * cs, x[1] * cs);
                let (ux, uy, uz) = (x[0] - cx, x[1] - cy, x[2]);
                let un = (ux * ux + uy * uy + uz * uz).sqrt();
                let a = S::from_f64(*tube_radius) / un;
                x[0] = cx + ux * a;
                x[1] = cy + uy * a;
                x[2] = uz * a;
            }
            Manifold::Euclidean { .. } => {}
        }
    }

    /// Orthogonal (w.r.t. the ambient metric) projection of `w` onto the
    /// tangent space at `x`.
    pub(crate) fn project_tangent<S: Real>(&self, x: &[S], w: &mut [S]) {
        match self {
            Manifold::Sphere { radius } => {
                let c = dot(x, w).scale(1.0 / (radius * radius));
                for i in 0..w.len() {
                    w[i] -= x[i] * c;
                }
            }
            Manifold::Hyperbolic { radius } => {
                // <x,x> = -r^2, so the tangential part is w + <w,x> x / r^2.
                let c = dot_sig(&LORENTZ_SIG, x, w).scale(1.0 / (radius * radius));
                for i in 0..w.len() {
                    w[i] += x[i] * c;
                }
            }
            Manifold::Torus { .. } => {
                let mut n = [S::zero(); 3];
                self.torus_normal(x, &mut n);
                let c = dot(&n, w);
                for i in 0..3 {
                    w[i] -= n[i] * c;
                }
            }
            Manifold::Euclidean { .. } => {}
        }
    }

    /// Unit outward normal of the torus at `x`.
    fn torus_normal<S: Real>(&self, x: &[S], n: &mut [S; 3]) {
        let Manifold::Torus { ring_radius, tube_radius } = self else { unreachable!() };
        let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let cs = S::from_f64(*ring_radius) / rho;
        n[0] = (x[0] - x[0] * cs).scale(1.0 / tube_radius);
        n[1] = (x[1] - x[1] * cs).scale(1.0 / tube_radius);
        n[2] = x[2].scale(1.0 / tube_radius);
    }

    /// Derivative of a parallel vector field with value `v` at `x`, along a
    /// curve with velocity `xdot`. For a hypersurface the derivative is the
    /// normal component forced by the shape operator.
    pub(crate) fn transport_rhs<S: Real>(&self, x: &[S], xdot: &[S], v: &[S], out: &mut [S]) {
        match self {
            Manifold::Sphere { radius } => {
                let c = -dot(v, xdot).scale(1.0 / (radius * radius));
                for i in 0..3 {
                    out[i] = x[i] * c;
                }
            }
            Manifold::Hyperbolic { radius } => {
                let c = dot_sig(&LORENTZ_SIG, v, xdot).scale(1.0 / (radius * radius));
                for i in 0..3 {
                    out[i] = x[i] * c;
                }
            }
            Manifold::Torus { ring_radius, tube_radius } => {
                // dn[w] = (w - dc[w]) / a with c(x) = R (x,y,0)/rho.
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let inv_rho = S::one() / rho;
                let (hx, hy) = (x[0] * inv_rho, x[1] * inv_rho);
                let radial = hx * xdot[0] + hy * xdot[1];
                let scale = S::from_f64(*ring_radius) * inv_rho;
                let dcx = (xdot[0] - hx * radial) * scale;
                let dcy = (xdot[1] - hy * radial) * scale;
                let inv_a = 1.0 / tube_radius;
                let dn = [
                    (xdot[0] - dcx).scale(inv_a),
                    (xdot[1] - dcy).scale(inv_a),
                    xdot[2].scale(inv_a),
                ];
                let mut n = [S::zero(); 3];
                self.torus_normal(x, &mut n);
                let c = -(v[0] * dn[0] + v[1] * dn[1] + v[2] * dn[2]);
                for i in 0..3 {
                    out[i] = n[i] * c;
                }
            }
            Manifold::Euclidean { .. } => {
                for o in out.iter_mut() {
                    *o = S::zero();
                }
            }
        }
    }

    /// Gaussian curvature at `x` (surfaces; zero on flat space).
    pub(crate) fn gauss_curvature<S: Real>(&self, x: &[S]) -> S {
        match self {
            Manifold::Sphere { radius } => S::from_f64(1.0 / (radius * radius)),
            Manifold::Hyperbolic { radius } => S::from_f64(-1.0 / (radius * radius)),
            Manifold::Torus { ring_radius, tube_radius } => {
                // cos(theta) / (a (R + a cos(theta))) with a cos(theta) = rho - R.
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let dr = rho - S::from_f64(*ring_radius);
                dr / (rho.scale(tube_radius * tube_radius))
            }
            Manifold::Euclidean { .. } => S::zero(),
        }
    }

    /// Re-orthonormalizes a (row-major, d x n) frame at `x` by symmetric
    /// polar projection: tangent-project each vector, then right-multiply by
    /// the inverse square root of the Gram matrix. Closed form for d = 2;
    /// flat frames are exact and left untouched.
    pub(crate) fn polar_fix_frame<S: Real>(&self, x: &[S], f: &mut [S]) {
        if matches!(self, Manifold::Euclidean { .. }) {
            return;
        }
        let n = self.ambient_dim();
        debug_assert_eq!(f.len(), 2 * n);
        let (head, tail) = f.split_at_mut(n);
        self.project_tangent(x, head);
        self.project_tangent(x, tail);
        let a = self.ip(head, head);
        let b = self.ip(head, tail);
        let c = self.ip(tail, tail);
        // M^{-1/2} = [[c+s, -b], [-b, a+s]] / (s t) for 2x2 SPD M,
        // s = sqrt(det M), t = sqrt(tr M + 2 s).
        let s = (a * c - b * b).sqrt();
        let t = (a + c + s.scale(2.0)).sqrt();
        let inv_st = S::one() / (s * t);
        let m11 = (c + s) * inv_st;
        let m12 = -b * inv_st;
        let m22 = (a + s) * inv_st;
        for i in 0..n {
            let f1 = head[i];
            let f2 = tail[i];
            head[i] = f1 * m11 + f2 * m12;
            tail[i] = f1 * m12 + f2 * m22;
        }
    }

    /// A deterministic base point: north pole for the sphere and the
    /// hyperboloid, the outer equator for the torus, the origin for flat
    /// space.
    pub fn base_point(&self) -> Point {
        let coords = match self {
            Manifold::Sphere { radius } => DVector::from_vec(vec![0.0, 0.0, *radius]),
            Manifold::Hyperbolic { radius } => DVector::from_vec(vec![0.0, 0.0, *radius]),
            Manifold::Torus { ring_radius, tube_radius } => {
                DVector::from_vec(vec![ring_radius + tube_radius, 0.0, 0.0])
            }
            Manifold::Euclidean { dim } => DVector::zeros(*dim),
        };
        Point { coords }
    }

    /// Validates embedding coordinates as a point on the manifold.
    pub fn point(&self, coords: DVector<f64>) -> Result<Point> {
        if coords.len() != self.ambient_dim() {
            return Err(Error::InvalidArgument(format!(
                "expected {} embedding coordinates, got {}",
                self.ambient_dim(),
                coords.len()
            )));
        }
        let residual = self.point_residual(coords.as_slice());
        if residual > GEOM_TOL {
            return Err(Error::OffManifold { residual, tolerance: GEOM_TOL });
        }
        if let Manifold::Hyperbolic { .. } = self {
            if coords[2] <= 0.0 {
                return Err(Error::InvalidArgument(
                    "hyperboloid points must lie on the upper sheet (z > 0)".into(),
                ));
            }
        }
        Ok(Point { coords })
    }

    /// Projects arbitrary coordinates to the manifold. The input must be
    /// away from the projection's singular set (e.g. the torus axis).
    pub fn project(&self, mut coords: DVector<f64>) -> Result<Point> {
        if coords.len() != self.ambient_dim() {
            return Err(Error::InvalidArgument(format!(
                "expected {} embedding coordinates, got {}",
                self.ambient_dim(),
                coords.len()
            )));
        }
        self.project_point(coords.as_mut_slice());
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::Numerical("projection produced non-finite coordinates".into()));
        }
        self.point(coords)
    }

    /// Riemannian metric evaluated on tangent vectors at `p`.
    pub fn metric(&self, p: &Point, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_point(p)?;
        Ok(self.ip(u.as_slice(), v.as_slice()))
    }

    pub(crate) fn check_point(&self, p: &Point) -> Result<()> {
        let residual = self.point_residual(p.coords.as_slice());
        if residual > GEOM_TOL {
            return Err(Error::OffManifold { residual, tolerance: GEOM_TOL });
        }
        Ok(())
    }

    /// Deterministic right-handed orthonormal frame at `p`. On the torus the
    /// first vector is azimuthal and the second points along the tube.
    pub fn canonical_frame(&self, p: &Point) -> Result<Frame> {
        self.check_point(p)?;
        let x = p.coords.as_slice();
        let vectors: Vec<DVector<f64>> = match self {
            Manifold::Sphere { .. } | Manifold::Hyperbolic { .. } => {
                let seed = if (x[0].abs() + x[1].abs()) > 0.1 * x[2].abs() {
                    DVector::from_vec(vec![0.0, 0.0, 1.0])
                } else {
                    DVector::from_vec(vec![1.0, 0.0, 0.0])
                };
                let f1 = self.normalize_tangent(p, seed)?;
                let seed2 = if f1[0].abs() < 0.9 {
                    DVector::from_vec(vec![1.0, 0.0, 0.0])
                } else {
                    DVector::from_vec(vec![0.0, 1.0, 0.0])
                };
                let mut f2 = seed2;
                self.project_tangent(x, f2.as_mut_slice());
                let c = self.ip(f1.as_slice(), f2.as_slice());
                f2 -= &f1 * c;
                let mut f2 = self.normalize_tangent(p, f2)?;
                if orientation_det(x, &f1, &f2) < 0.0 {
                    f2 = -f2;
                }
                vec![f1, f2]
            }
            Manifold::Torus { ring_radius, .. } => {
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let azimuthal = DVector::from_vec(vec![-x[1] / rho, x[0] / rho, 0.0]);
                let (ct, st) = ((rho - ring_radius), x[2]);
                let tube_norm = (ct * ct + st * st).sqrt();
                let (ct, st) = (ct / tube_norm, st / tube_norm);
                let tube = DVector::from_vec(vec![-st * x[0] / rho, -st * x[1] / rho, ct]);
                vec![azimuthal, tube]
            }
            Manifold::Euclidean { dim } => (0..*dim)
                .map(|i| {
                    let mut e = DVector::zeros(*dim);
                    e[i] = 1.0;
                    e
                })
                .collect(),
        };
        Frame::new(self, p.clone(), vectors)
    }

    fn normalize_tangent(&self, p: &Point, mut v: DVector<f64>) -> Result<DVector<f64>> {
        self.project_tangent(p.coords.as_slice(), v.as_mut_slice());
        let n = self.ip(v.as_slice(), v.as_slice()).sqrt();
        if !(n > 1e-14) {
            return Err(Error::Numerical("degenerate tangent direction".into()));
        }
        Ok(v / n)
    }

    /// Frame at `p` rotated by `angle` relative to the canonical frame
    /// (counter-clockwise in the frame's orientation). Surfaces only.
    pub fn rotated_frame(&self, p: &Point, angle: f64) -> Result<Frame> {
        let base = self.canonical_frame(p)?;
        Ok(base.rotated(angle))
    }

    /// Curvature components `R_ijkl = <f_l, R(f_i, f_j) f_k>` in an
    /// orthonormal frame. For a surface these are determined by the Gaussian
    /// curvature at the base point.
    pub fn curvature_in_frame(&self, frame: &Frame) -> CurvatureTensor {
        let d = self.dim();
        let kappa = self.gauss_curvature(frame.base().coords.as_slice());
        let mut comps = vec![0.0; d * d * d * d];
        if kappa != 0.0 {
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        for l in 0..d {
                            let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                            comps[((i * d + j) * d + k) * d + l] =
                                kappa * (delta(j, k) * delta(i, l) - delta(i, k) * delta(j, l));
                        }
                    }
                }
            }
        }
        CurvatureTensor { dim: d, comps }
    }

    /// One step of the frame flow: advance the base point with constant
    /// frame components of `v` and parallel-transport the frame, then apply
    /// drift control. Orthonormality is preserved to machine precision.
    pub fn parallel_transport_step(
        &self,
        p: &Point,
        frame: &Frame,
        v: &DVector<f64>,
        h: f64,
    ) -> Result<(Point, Frame)> {
        if h <= 0.0 {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        self.check_point(p)?;
        let w = frame.components(self, v);
        let mut state = pack_frame_state(p, frame);
        let sys = FrameFlow { manifold: self, control: |_t: f64, out: &mut [f64]| {
            out.copy_from_slice(w.as_slice());
        }};
        integrate_fixed(&sys, &mut state, 0.0, h, 1, |_, _, _| {});
        unpack_frame_state(self, &state)
    }

    /// Geodesic from `p` with initial velocity `v`, integrated as the
    /// development of a straight line; constant speed along the result.
    pub fn geodesic(&self, p: &Point, v: &DVector<f64>, horizon: f64, n_steps: usize) -> Result<PathRecord> {
        let frame = self.canonical_frame(p)?;
        let w = frame.components(self, v);
        crate::development::develop_linear(self, &frame, &w, horizon, n_steps)
    }

    /// Exponential map. Closed form on the sphere, the hyperboloid and flat
    /// space; geodesic integration on the torus.
    pub fn exp_map(&self, p: &Point, v: &DVector<f64>) -> Result<Point> {
        self.check_point(p)?;
        let x = &p.coords;
        match self {
            Manifold::Euclidean { .. } => Ok(Point { coords: x + v }),
            Manifold::Sphere { radius } => {
                let s = self.ip(v.as_slice(), v.as_slice()).sqrt();
                if s < 1e-300 {
                    return Ok(p.clone());
                }
                let coords = x * (s / radius).cos() + v * ((s / radius).sin() * radius / s);
                self.project(coords)
            }
            Manifold::Hyperbolic { radius } => {
                let s = self.ip(v.as_slice(), v.as_slice()).sqrt();
                if s < 1e-300 {
                    return Ok(p.clone());
                }
                let coords = x * (s / radius).cosh() + v * ((s / radius).sinh() * radius / s);
                self.project(coords)
            }
            Manifold::Torus { .. } => {
                let s = self.ip(v.as_slice(), v.as_slice()).sqrt();
                if s < 1e-300 {
                    return Ok(p.clone());
                }
                let n_steps = (64.0_f64).max(s / 2e-3).min(40_000.0) as usize;
                let path = self.geodesic(p, v, 1.0, n_steps)?;
                Ok(path.endpoint())
            }
        }
    }

    /// Inverse of the exponential map. Closed form except on the torus,
    /// where a shooting solve is used; at sphere antipodes the direction is
    /// non-unique and the canonical frame's first direction is returned.
    pub fn log_map(&self, p: &Point, q: &Point) -> Result<DVector<f64>> {
        self.check_point(p)?;
        self.check_point(q)?;
        let (x, y) = (&p.coords, &q.coords);
        match self {
            Manifold::Euclidean { .. } => Ok(y - x),
            Manifold::Sphere { radius } => {
                let r2 = radius * radius;
                let cosang = (x.dot(y) / r2).clamp(-1.0, 1.0);
                let d = radius * cosang.acos();
                let mut u = y - x * (x.dot(y) / r2);
                let un = u.norm();
                if un < 1e-9 * radius {
                    if d < 1e-9 * radius {
                        return Ok(DVector::zeros(3));
                    }
                    // Antipodal: any direction is a minimizer.
                    u = self.canonical_frame(p)?.vector(0);
                    return Ok(u * d);
                }
                Ok(u * (d / un))
            }
            Manifold::Hyperbolic { radius } => {
                let r2 = radius * radius;
                let inner = self.ip(x.as_slice(), y.as_slice());
                let c = (-inner / r2).max(1.0);
                let d = radius * c.acosh();
                let mut u = y.clone();
                self.project_tangent(x.as_slice(), u.as_mut_slice());
                let un = self.ip(u.as_slice(), u.as_slice()).sqrt();
                if un < 1e-14 {
                    return Ok(DVector::zeros(3));
                }
                Ok(u * (d / un))
            }
            Manifold::Torus { .. } => self.torus_log(p, q),
        }
    }

    /// Riemannian distance. Closed form except on the torus, where the
    /// minimum over a fan of shooting solves is used.
    pub fn distance(&self, p: &Point, q: &Point) -> Result<f64> {
        match self {
            Manifold::Torus { .. } => {
                let v = self.torus_log(p, q)?;
                Ok(self.ip(v.as_slice(), v.as_slice()).sqrt())
            }
            _ => {
                let v = self.log_map(p, q)?;
                Ok(self.ip(v.as_slice(), v.as_slice()).sqrt())
            }
        }
    }

    /// Shooting-based log map on the torus: Gauss-Newton over the initial
    /// angle and the arc length of a geodesic from `p`, multi-started over a
    /// fan of directions; returns the shortest converged solution.
    fn torus_log(&self, p: &Point, q: &Point) -> Result<DVector<f64>> {
        self.check_point(p)?;
        self.check_point(q)?;
        let frame = self.canonical_frame(p)?;
        let chord = (&q.coords - &p.coords).norm();
        if chord < 1e-13 {
            return Ok(DVector::zeros(3));
        }
        let Manifold::Torus { ring_radius, tube_radius } = self else { unreachable!() };
        let scale = ring_radius + tube_radius;

        let mut best: Option<(f64, f64, f64)> = None; // (length, angle, length)
        for i in 0..16 {
            let beta0 = 2.0 * std::f64::consts::PI * i as f64 / 16.0;
            for s_mult in [1.0, 1.7, 2.6] {
                let s0 = (chord * s_mult).min(6.0 * scale);
                if let Some((beta, s)) = self.torus_shoot_newton(&frame, q, beta0, s0) {
                    if best.map_or(true, |(l, _, _)| s < l) {
                        best = Some((s, beta, s));
                    }
                }
            }
        }
        let Some((_, beta, s)) = best else {
            return Err(Error::Numerical("torus log map failed to converge".into()));
        };
        let dir = frame.vector(0) * beta.cos() + frame.vector(1) * beta.sin();
        let _ = tube_radius;
        Ok(dir * s)
    }

    fn torus_shoot_newton(&self, frame: &Frame, q: &Point, beta0: f64, s0: f64) -> Option<(f64, f64)> {
        let mut beta = beta0;
        let mut s = s0;
        let n_steps = ((s0 / 4e-3) as usize).clamp(128, 8192);
        for _ in 0..40 {
            // Endpoint of the unit-speed geodesic, with sensitivities in (beta, s).
            let b = Dual::<2>::seeded(beta, 0);
            let sd = Dual::<2>::seeded(s, 1);
            let w = [b.cos_d() * sd, b.sin_d() * sd];
            let end = flow_endpoint_dual2(self, frame, &w, n_steps);
            let mut r2 = 0.0;
            let mut jt_r = [0.0; 2];
            let mut jt_j = [[0.0; 2]; 2];
            for i in 0..3 {
                let ri = end[i].re - q.coords[i];
                r2 += ri * ri;
                for a in 0..2 {
                    jt_r[a] += end[i].dx[a] * ri;
                    for bb in 0..2 {
                        jt_j[a][bb] += end[i].dx[a] * end[i].dx[bb];
                    }
                }
            }
            if r2.sqrt() < 1e-11 {
                return (s > 0.0).then_some((beta, s));
            }
            let det = jt_j[0][0] * jt_j[1][1] - jt_j[0][1] * jt_j[1][0];
            if det.abs() < 1e-14 {
                return None;
            }
            let db = (jt_j[1][1] * jt_r[0] - jt_j[0][1] * jt_r[1]) / det;
            let ds = (-jt_j[1][0] * jt_r[0] + jt_j[0][0] * jt_r[1]) / det;
            // Damped Gauss-Newton step.
            let damp = 1.0_f64.min(0.8 * s.abs() / ds.abs().max(1e-30));
            beta -= db * damp;
            s -= ds * damp;
            if !beta.is_finite() || !s.is_finite() || s <= 0.0 {
                return None;
            }
        }
        None
    }

    /// A pseudo-random point, used for multi-start heuristics and tests.
    pub fn random_point(&self, rng: &mut impl rand::Rng) -> Point {
        use rand_distr::StandardNormal;
        match self {
            Manifold::Sphere { .. } => {
                let v: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                self.project(DVector::from_vec(v)).expect("gaussian direction")
            }
            Manifold::Hyperbolic { .. } => {
                let base = self.base_point();
                let f = self.canonical_frame(&base).unwrap();
                let a: f64 = rng.sample::<f64, _>(StandardNormal) * 0.7;
                let b: f64 = rng.sample::<f64, _>(StandardNormal) * 0.7;
                let v = f.vector(0) * a + f.vector(1) * b;
                self.exp_map(&base, &v).unwrap()
            }
            Manifold::Torus { ring_radius, tube_radius } => {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let rho = ring_radius + tube_radius * theta.cos();
                self.point(DVector::from_vec(vec![
                    rho * phi.cos(),
                    rho * phi.sin(),
                    tube_radius * theta.sin(),
                ]))
                .unwrap()
            }
            Manifold::Euclidean { dim } => {
                let v: Vec<f64> = (0..*dim).map(|_| rng.sample(StandardNormal)).collect();
                Point { coords: DVector::from_vec(v) }
            }
        }
    }
}

/// Orientation determinant det[f1, f2, n-like] used to fix right-handedness.
fn orientation_det(x: &[f64], f1: &DVector<f64>, f2: &DVector<f64>) -> f64 {
    // Third column: the (possibly timelike) normal direction x itself; only
    // the sign matters.
    f1[0] * (f2[1] * x[2] - f2[2] * x[1]) - f1[1] * (f2[0] * x[2] - f2[2] * x[0])
        + f1[2] * (f2[0] * x[1] - f2[1] * x[0])
}

/// A validated point on a manifold, in embedding coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub(crate) coords: DVector<f64>,
}

impl Point {
    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    /// Euclidean distance between embedding coordinate vectors; a smooth
    /// mismatch measure, not the Riemannian distance.
    pub fn chord_distance(&self, other: &Point) -> f64 {
        (&self.coords - &other.coords).norm()
    }
}

/// An orthonormal tangent frame at a point: `vectors[i]` is `f_i` in
/// embedding coordinates.
#[derive(Clone, Debug)]
pub struct Frame {
    base: Point,
    vectors: Vec<DVector<f64>>,
}

impl Frame {
    /// Validates orthonormality and tangency at the base point.
    pub fn new(m: &Manifold, base: Point, vectors: Vec<DVector<f64>>) -> Result<Frame> {
        m.check_point(&base)?;
        let d = m.dim();
        if vectors.len() != d {
            return Err(Error::InvalidArgument(format!(
                "frame needs {} vectors, got {}",
                d,
                vectors.len()
            )));
        }
        let x = base.coords.as_slice();
        for (i, v) in vectors.iter().enumerate() {
            let mut t = v.clone();
            m.project_tangent(x, t.as_mut_slice());
            if (&t - v).norm() > GEOM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "frame vector {i} is not tangent (residual {:.3e})",
                    (&t - v).norm()
                )));
            }
        }
        for i in 0..d {
            for j in i..d {
                let ip = m.ip(vectors[i].as_slice(), vectors[j].as_slice());
                let target = if i == j { 1.0 } else { 0.0 };
                if (ip - target).abs() > GEOM_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "frame is not orthonormal: <f{i}, f{j}> = {ip:.12}"
                    )));
                }
            }
        }
        Ok(Frame { base, vectors })
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors[i].clone()
    }

    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.vectors
    }

    /// Frame components of an ambient tangent vector.
    pub fn components(&self, m: &Manifold, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.vectors.len(),
            self.vectors.iter().map(|f| m.ip(f.as_slice(), v.as_slice())),
        )
    }

    /// Tangent vector with the given frame components.
    pub fn combine(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.vectors[0].len());
        for (i, f) in self.vectors.iter().enumerate() {
            out += f * w[i];
        }
        out
    }

    /// In-plane rotation by `angle` (surfaces).
    pub fn rotated(&self, angle: f64) -> Frame {
        assert_eq!(self.vectors.len(), 2, "rotation is defined for surface frames");
        let (c, s) = (angle.cos(), angle.sin());
        let f1 = &self.vectors[0] * c + &self.vectors[1] * s;
        let f2 = &self.vectors[0] * (-s) + &self.vectors[1] * c;
        Frame { base: self.base.clone(), vectors: vec![f1, f2] }
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        let n = self.vectors[0].len();
        let d = self.vectors.len();
        DMatrix::from_fn(n, d, |r, c| self.vectors[c][r])
    }

    /// Max deviation of the Gram matrix from the identity.
    pub fn orthonormality_residual(&self, m: &Manifold) -> f64 {
        let d = self.vectors.len();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let ip = m.ip(self.vectors[i].as_slice(), self.vectors[j].as_slice());
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((ip - target).abs());
            }
        }
        worst
    }
}

/// Curvature components in a frame, `R_ijkl`, stored densely.
#[derive(Clone, Debug)]
pub struct CurvatureTensor {
    dim: usize,
    comps: Vec<f64>,
}

impl CurvatureTensor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let d = self.dim;
        self.comps[((i * d + j) * d + k) * d + l]
    }

    /// Max violation of the antisymmetry and pair-symmetry identities.
    pub fn symmetry_residual(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        let r = self.get(i, j, k, l);
                        worst = worst.max((r + self.get(j, i, k, l)).abs());
                        worst = worst.max((r + self.get(i, j, l, k)).abs());
                        worst = worst.max((r - self.get(k, l, i, j)).abs());
                    }
                }
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// Frame-flow kernel: coupled evolution of a base point and a parallel frame
// driven by frame components of the velocity. State layout:
// [x (n) | f_0 (n) | ... | f_{d-1} (n)].
// ---------------------------------------------------------------------------

pub(crate) struct FrameFlow<'a, C> {
    pub manifold: &'a Manifold,
    /// Writes the d frame components of the velocity at time `t`.
    pub control: C,
}

impl<'a, S: Real, C: Fn(f64, &mut [S])> OdeSystem<S> for FrameFlow<'a, C> {
    fn dim(&self) -> usize {
        let n = self.manifold.ambient_dim();
        n * (1 + self.manifold.dim())
    }

    fn rhs(&self, t: f64, y: &[S], dy: &mut [S]) {
        let m = self.manifold;
        let n = m.ambient_dim();
        let d = m.dim();
        let mut w = vec![S::zero(); d];
        (self.control)(t, &mut w);
        let x = &y[..n];
        // xdot = sum_i w_i f_i
        for c in 0..n {
            let mut acc = S::zero();
            for i in 0..d {
                acc += y[n * (1 + i) + c] * w[i];
            }
            dy[c] = acc;
        }
        let (xdot, rest) = dy.split_at_mut(n);
        for i in 0..d {
            let fi = &y[n * (1 + i)..n * (2 + i)];
            m.transport_rhs(x, xdot, fi, &mut rest[n * i..n * (i + 1)]);
        }
    }

    fn stabilize(&self, y: &mut [S]) {
        let m = self.manifold;
        let n = m.ambient_dim();
        let (x, f) = y.split_at_mut(n);
        m.project_point(x);
        m.polar_fix_frame(x, f);
    }
}

pub(crate) fn pack_frame_state<S: Real>(p: &Point, frame: &Frame) -> Vec<S> {
    let n = p.coords.len();
    let d = frame.vectors.len();
    let mut y = Vec::with_capacity(n * (1 + d));
    y.extend(p.coords.iter().map(|&c| S::from_f64(c)));
    for i in 0..d {
        y.extend(frame.vectors[i].iter().map(|&c| S::from_f64(c)));
    }
    y
}

pub(crate) fn unpack_frame_state(m: &Manifold, y: &[f64]) -> Result<(Point, Frame)> {
    let n = m.ambient_dim();
    let d = m.dim();
    let point = m.point(DVector::from_column_slice(&y[..n]))?;
    let vectors = (0..d)
        .map(|i| DVector::from_column_slice(&y[n * (1 + i)..n * (2 + i)]))
        .collect();
    let frame = Frame::new(m, point.clone(), vectors)?;
    Ok((point, frame))
}

/// Endpoint of the constant-control frame flow over dual numbers, used by
/// the torus shooting log map.
fn flow_endpoint_dual2(m: &Manifold, frame: &Frame, w: &[Dual<2>; 2], n_steps: usize) -> [Dual<2>; 3] {
    let mut y = pack_frame_state::<Dual<2>>(frame.base(), frame);
    let sys = FrameFlow { manifold: m, control: |_t: f64, out: &mut [Dual<2>]| {
        out[0] = w[0];
        out[1] = w[1];
    }};
    let h = 1.0 / n_steps as f64;
    integrate_fixed(&sys, &mut y, 0.0, h, n_steps, |_, _, _| {});
    [y[0], y[1], y[2]]
}

impl Dual<2> {
    fn cos_d(self) -> Self {
        let mut dx = [0.0; 2];
        for i in 0..2 {
            dx[i] = -self.re.sin() * self.dx[i];
        }
        Dual { re: self.re.cos(), dx }
    }
    fn sin_d(self) -> Self {
        let mut dx = [0.0; 2];
        for i in 0..2 {
            dx[i] = self.re.cos() * self.dx[i];
        }
        Dual { re: self.re.sin(), dx }
    }
}
