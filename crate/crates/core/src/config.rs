//! JSON run configuration. Unknown keys are rejected so that typos surface
//! as errors instead of silently falling back to defaults.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::development::Covariance;
use crate::error::{Error, Result};
use crate::geometry::{Frame, Manifold, Point};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ManifoldConfig {
    Sphere { r: f64 },
    Hyperbolic { r: f64 },
    Torus {
        #[serde(rename = "R")]
        ring: f64,
        a: f64,
    },
    Euclidean { d: usize },
}

impl ManifoldConfig {
    pub fn to_manifold(&self) -> Result<Manifold> {
        match *self {
            ManifoldConfig::Sphere { r } => Manifold::sphere(r),
            ManifoldConfig::Hyperbolic { r } => Manifold::hyperbolic(r),
            ManifoldConfig::Torus { ring, a } => Manifold::torus(ring, a),
            ManifoldConfig::Euclidean { d } => Manifold::euclidean(d),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    /// Eigenvalue square roots, descending.
    pub lambdas: Vec<f64>,
    /// Embedding coordinates of the base point; the manifold's canonical
    /// base point when omitted.
    #[serde(default)]
    pub base_point: Option<Vec<f64>>,
    /// Eigenframe vectors in embedding coordinates; the canonical frame at
    /// the base point when omitted.
    #[serde(default)]
    pub frame: Option<Vec<Vec<f64>>>,
}

impl CovarianceConfig {
    pub fn to_covariance(&self, m: &Manifold) -> Result<Covariance> {
        let base = match &self.base_point {
            Some(coords) => m.point(DVector::from_vec(coords.clone()))?,
            None => m.base_point(),
        };
        let frame = match &self.frame {
            Some(vectors) => Frame::new(
                m,
                base.clone(),
                vectors.iter().map(|v| DVector::from_vec(v.clone())).collect(),
            )?,
            None => m.canonical_frame(&base)?,
        };
        Covariance::new(m, frame, self.lambdas.clone())
    }

    pub fn base(&self, m: &Manifold) -> Result<Point> {
        match &self.base_point {
            Some(coords) => m.point(DVector::from_vec(coords.clone())),
            None => Ok(m.base_point()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Fixed RK4 step count per unit horizon.
    pub steps: usize,
    /// Residual threshold of boundary-value solves.
    pub tolerance: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// Seed of the counter-based generator; all randomness derives from it.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { steps: 1000, tolerance: 1e-10, max_iters: 200, restarts: 8, seed: 0 }
    }
}

/// Parameter sweep of the closed-form fan command.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FanConfig {
    pub psi_values: Vec<f64>,
    pub t_values: Vec<f64>,
    /// Branch signs to sweep; both when omitted.
    #[serde(default = "default_branches")]
    pub branches: Vec<f64>,
}

fn default_branches() -> Vec<f64> {
    vec![1.0, -1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifold: ManifoldConfig,
    #[serde(default)]
    pub covariance: Option<CovarianceConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub fan: Option<FanConfig>,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<RunConfig> {
        serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn manifold(&self) -> Result<Manifold> {
        self.manifold.to_manifold()
    }

    /// The configured covariance, or the isotropic unit covariance at the
    /// canonical base point when none is given.
    pub fn covariance(&self, m: &Manifold) -> Result<Covariance> {
        match &self.covariance {
            Some(cfg) => cfg.to_covariance(m),
            None => Covariance::isotropic(m, &m.base_point(), 1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_kind() {
        for (json, expected_dim) in [
            (r#"{"manifold": {"kind": "sphere", "r": 1.0}}"#, 2),
            (r#"{"manifold": {"kind": "hyperbolic", "r": 2.0}}"#, 2),
            (r#"{"manifold": {"kind": "torus", "R": 2.0, "a": 1.0}}"#, 2),
            (r#"{"manifold": {"kind": "euclidean", "d": 3}}"#, 3),
        ] {
            let cfg = RunConfig::from_json(json).unwrap();
            assert_eq!(cfg.manifold().unwrap().dim(), expected_dim);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"manifold": {"kind": "sphere", "r": 1.0, "bogus": 2}}"#;
        assert!(RunConfig::from_json(json).is_err());
        let json = r#"{"manifold": {"kind": "sphere", "r": 1.0}, "extra": 1}"#;
        assert!(RunConfig::from_json(json).is_err());
    }

    #[test]
    fn covariance_defaults_to_canonical_frame() {
        let json = r#"{
            "manifold": {"kind": "sphere", "r": 1.0},
            "covariance": {"lambdas": [2.0, 1.0]},
            "solver": {"steps": 500, "tolerance": 1e-9, "max_iters": 100, "restarts": 4, "seed": 7}
        }"#;
        let cfg = RunConfig::from_json(json).unwrap();
        let m = cfg.manifold().unwrap();
        let cov = cfg.covariance(&m).unwrap();
        assert_eq!(cov.lambdas(), &[2.0, 1.0]);
        assert_eq!(cfg.solver.seed, 7);
        assert_eq!(cfg.solver.steps, 500);
    }

    #[test]
    fn invalid_torus_rejected() {
        let cfg =
            RunConfig::from_json(r#"{"manifold": {"kind": "torus", "R": 1.0, "a": 2.0}}"#).unwrap();
        assert!(cfg.manifold().is_err());
    }
}
