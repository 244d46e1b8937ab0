//! Discretized trajectory with per-step diagnostics.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geometry::{Frame, Point};

/// A discretized curve on a manifold together with the data carried along by
/// the integrators: frame components of the velocity, the antisymmetric
/// state `chi` (strict upper triangle; empty for plain geodesics and
/// developments), the first integral `c(t)` and the running energy.
#[derive(Clone, Debug)]
pub struct PathRecord {
    pub times: Vec<f64>,
    /// Embedding coordinates of the curve at each node.
    pub points: Vec<DVector<f64>>,
    /// Frame components of the velocity at each node (outgoing slope for
    /// piecewise-linear developments).
    pub velocities: Vec<DVector<f64>>,
    /// Strict upper triangle of `chi` at each node; empty vectors when the
    /// producing operation carries no `chi`.
    pub chis: Vec<DVector<f64>>,
    /// First integral `c(t)` (covariance-weighted speed; plain speed for
    /// unweighted paths).
    pub speeds: Vec<f64>,
    /// Cumulative energy up to each node.
    pub energies: Vec<f64>,
    pub initial_frame: Frame,
    pub final_frame: Frame,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn endpoint(&self) -> Point {
        self.final_frame.base().clone()
    }

    pub fn start(&self) -> Point {
        self.initial_frame.base().clone()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Final `chi` (strict upper triangle).
    pub fn final_chi(&self) -> DVector<f64> {
        self.chis.last().cloned().unwrap_or_else(|| DVector::zeros(0))
    }

    /// Squared norm of the final `chi` under `<A, B> = -tr(AB)/2`, i.e. the
    /// sum of squared strict-upper-triangle entries.
    pub fn final_chi_norm_squared(&self) -> f64 {
        self.final_chi().iter().map(|c| c * c).sum()
    }

    /// Max relative drift of the first integral along the record.
    pub fn first_integral_drift(&self) -> f64 {
        let c0 = self.speeds.first().copied().unwrap_or(0.0);
        if c0 == 0.0 {
            return 0.0;
        }
        self.speeds.iter().map(|c| (c - c0).abs() / c0).fold(0.0, f64::max)
    }

    /// Max pointwise embedding distance against another record on the same
    /// grid.
    pub fn max_pointwise_distance(&self, other: &PathRecord) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::InvalidArgument(format!(
                "records have different lengths ({} vs {})",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }
}
