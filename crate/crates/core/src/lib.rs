//! Most probable paths of anisotropic Brownian motions on Riemannian manifolds.
//!
//! An anisotropic diffusion on a manifold is built by rolling a Euclidean
//! Brownian motion through a parallel frame whose shape encodes the
//! infinitesimal covariance. The curves that such a process most probably
//! follows between two points are not Riemannian geodesics: they satisfy a
//! coupled ODE system on the frame bundle in which the Riemannian curvature
//! and the covariance eigenvalues interact through an auxiliary antisymmetric
//! state `chi` with terminal condition `chi(T) = 0`.
//!
//! The crate provides
//!
//! * built-in geometries (sphere, hyperbolic plane, embedded torus, flat
//!   space) with parallel transport, curvature and geodesics ([`geometry`]),
//! * deterministic and stochastic development of Euclidean paths
//!   ([`development`]),
//! * the most-probable-path initial-value integrator together with a
//!   Hamiltonian formulation used as an independent cross-check
//!   ([`dynamics`]),
//! * closed-form solutions on constant-curvature surfaces through Jacobi
//!   elliptic functions ([`surfaces`], [`elliptic`]),
//! * a boundary-value shooting solver with forward-mode derivative
//!   propagation ([`shooting`]),
//! * diffusion-mean and covariance estimators, including a reusable
//!   endpoint lattice for the unit sphere ([`estimation`]).
//!
//! All public types are plain values: they are `Send + Sync`, immutable
//! after construction, and safe to share across threads. Operations are
//! pure functions; parallelism (sampling, solver restarts, per-sample
//! estimation solves) is internal and has no shared mutable state.

pub mod config;
pub mod development;
pub mod dual;
pub mod dynamics;
pub mod elliptic;
pub mod error;
pub mod estimation;
pub mod geometry;
mod ode;
pub mod path;
pub mod shooting;
pub mod surfaces;

pub use error::{Error, Result};
pub use geometry::{CurvatureTensor, Frame, Manifold, Point};
pub use path::PathRecord;
