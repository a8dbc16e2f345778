//! Controlled fully coupled FBSDE problems.
//!
//! A [`ControlProblem`] bundles the coefficients `b, sigma, f, Phi`, the
//! discretized control set, and the monotone structure `(G, beta1, beta2,
//! mu1, K, L_sigma)`. Only scalar backward components are supported
//! (`Y`, `f`, `Phi` real valued).

mod builtin;
mod config;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprdsl::{Bindings, EvalError, ParseError};

pub use builtin::{builtin, Builtin, BUILTIN_NAMES};
pub use config::{
    load_problem, load_problem_file, load_problem_str, ExprCoefficients, ProblemConfig,
};

/// Evaluation point `(t, x, y, z, u)`.
pub type Point<'a> = Bindings<'a>;

/// Which arguments the forward coefficients actually read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependence {
    pub drift_on_y: bool,
    pub drift_on_z: bool,
    pub sigma_on_y: bool,
    pub sigma_on_z: bool,
}

impl Dependence {
    /// The forward equation reads the backward solution.
    pub fn forward_coupled(&self) -> bool {
        self.drift_on_y || self.drift_on_z || self.sigma_on_y || self.sigma_on_z
    }
}

/// Coefficient evaluators of the controlled system.
///
/// `diffusion` writes the `n x d` matrix row-major into `out`.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn drift(&self, p: &Point<'_>, out: &mut [f64]) -> Result<(), EvalError>;
    fn diffusion(&self, p: &Point<'_>, out: &mut [f64]) -> Result<(), EvalError>;
    fn driver(&self, p: &Point<'_>) -> Result<f64, EvalError>;
    fn terminal(&self, x: &[f64]) -> Result<f64, EvalError>;
    fn dependence(&self) -> Dependence;
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("unknown builtin problem \"{0}\"")]
    UnknownBuiltin(String),
    #[error("parameter {name} = {value} out of range: {reason}")]
    ParameterOutOfRange {
        name: String,
        value: f64,
        reason: String,
    },
    #[error("invalid control set: {0}")]
    InvalidControls(String),
    #[error("cannot parse {field}: {source}")]
    Expression {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("malformed configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Compact control space realized as a finite point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    k: usize,
    points: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn finite(points: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let Some(first) = points.first() else {
            return Err(ModelError::InvalidControls("control set is empty".into()));
        };
        let k = first.len();
        if points.iter().any(|p| p.len() != k) {
            return Err(ModelError::InvalidControls(
                "control points have differing dimensions".into(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidControls(
                "non-finite control value".into(),
            ));
        }
        Ok(Self { k, points })
    }

    /// Tensor grid over `[lo, hi]` with `count[a]` points on axis `a`.
    pub fn boxed(lo: &[f64], hi: &[f64], count: &[usize]) -> Result<Self, ModelError> {
        let k = lo.len();
        if hi.len() != k || count.len() != k || k == 0 {
            return Err(ModelError::InvalidControls(
                "lo, hi and count must have the same positive length".into(),
            ));
        }
        for a in 0..k {
            if !(lo[a].is_finite() && hi[a].is_finite()) || lo[a] >= hi[a] {
                return Err(ModelError::InvalidControls(format!(
                    "axis {a}: need lo < hi, got [{}, {}]",
                    lo[a], hi[a]
                )));
            }
            if count[a] < 2 {
                return Err(ModelError::InvalidControls(format!(
                    "axis {a}: need at least 2 points, got {}",
                    count[a]
                )));
            }
        }
        let axes: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                let m = count[a] - 1;
                (0..=m)
                    .map(|i| {
                        if i == m {
                            hi[a]
                        } else {
                            lo[a] + (hi[a] - lo[a]) * i as f64 / m as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let mut points = vec![Vec::new()];
        for axis in &axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        Ok(Self { k, points })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> &[f64] {
        &self.points[idx]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// True when every point of `self` belongs to `other`.
    pub fn is_subset_of(&self, other: &ControlSet) -> bool {
        self.points.iter().all(|p| other.points.contains(p))
    }
}

/// Constants of the monotonicity and Lipschitz assumptions (m = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneStructure {
    /// Full-rank `1 x n` matrix.
    pub g: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub mu1: f64,
    /// Lipschitz constant of `b, sigma, f, Phi`.
    pub k_lip: f64,
    /// Lipschitz constant of `sigma` in `z`.
    pub l_sigma: f64,
}

impl MonotoneStructure {
    pub fn trivial(n: usize, k_lip: f64, l_sigma: f64) -> Self {
        let mut g = vec![0.0; n];
        g[0] = 1.0;
        Self {
            g,
            beta1: 0.0,
            beta2: 0.0,
            mu1: 0.0,
            k_lip,
            l_sigma,
        }
    }

    pub fn g_norm_sq(&self) -> f64 {
        self.g.iter().map(|v| v * v).sum()
    }

    fn validate(&self, n: usize) -> Result<(), ModelError> {
        if self.g.len() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "G has {} entries, state dimension is {n}",
                self.g.len()
            )));
        }
        if self.g.iter().all(|v| *v == 0.0) {
            return Err(ModelError::DimensionMismatch(
                "G must have full rank".into(),
            ));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("mu1", self.mu1),
            ("K", self.k_lip),
            ("L_sigma", self.l_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::ParameterOutOfRange {
                    name: name.into(),
                    value: v,
                    reason: "must be finite and nonnegative".into(),
                });
            }
        }
        Ok(())
    }
}

/// Which solvability argument the problem relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Global solvability under the monotonicity conditions.
    Monotone,
    /// Solvability on short intervals under Lipschitz + small `L_sigma`.
    SmallInterval,
}

impl std::str::FromStr for Regime {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "monotone" => Ok(Regime::Monotone),
            "small-interval" | "small_interval" => Ok(Regime::SmallInterval),
            other => Err(ModelError::InvalidRegime(format!(
                "unknown regime \"{other}\""
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub coefficients: Arc<dyn Coefficients>,
    pub controls: ControlSet,
    pub structure: MonotoneStructure,
    pub regime: Regime,
    /// Set for builtin benchmarks; carries the closed forms.
    pub builtin: Option<Builtin>,
}

impl ControlProblem {
    /// Checks dimensional consistency and the regime constraints.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n == 0 || self.d == 0 {
            return Err(ModelError::DimensionMismatch(
                "n and d must be positive".into(),
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::ParameterOutOfRange {
                name: "horizon".into(),
                value: self.horizon,
                reason: "must be positive".into(),
            });
        }
        self.structure.validate(self.n)?;
        if self.regime == Regime::Monotone {
            let s = &self.structure;
            if s.beta1 + s.beta2 <= 0.0 {
                return Err(ModelError::InvalidRegime(
                    "monotone regime requires beta1 + beta2 > 0".into(),
                ));
            }
            if s.beta2 + s.mu1 <= 0.0 {
                return Err(ModelError::InvalidRegime(
                    "monotone regime requires beta2 + mu1 > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.controls.dim()
    }

    pub fn dependence(&self) -> Dependence {
        self.coefficients.dependence()
    }

    /// Closed-form value function, when the problem has one.
    pub fn closed_form_value(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.builtin
            .as_ref()
            .and_then(|b| b.value(t, x, self.horizon, &self.controls))
    }

    /// Short SHA-256 digest of the problem: dimensions, controls, structure and
    /// coefficient values at a few fixed points.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!(
            "{}|{}|{}|{:e}|{:?}|",
            self.name, self.n, self.d, self.horizon, self.regime
        ));
        h.update(serde_json::to_string(&self.controls).unwrap_or_default());
        h.update(serde_json::to_string(&self.structure).unwrap_or_default());
        let c = &self.coefficients;
        let mut b = vec![0.0; self.n];
        let mut s = vec![0.0; self.n * self.d];
        for k in 0..8 {
            let v = 0.37 * k as f64 - 1.1;
            let x: Vec<f64> = (0..self.n).map(|a| v + 0.21 * a as f64).collect();
            let z: Vec<f64> = (0..self.d).map(|a| 0.5 - v + 0.13 * a as f64).collect();
            let u = self.controls.point(k % self.controls.len());
            let pt = Point {
                t: self.horizon * k as f64 / 8.0,
                x: &x,
                y: 0.3 * v,
                z: &z,
                u,
            };
            let f = c.driver(&pt).unwrap_or(f64::NAN);
            let _ = c.drift(&pt, &mut b);
            let _ = c.diffusion(&pt, &mut s);
            let phi = c.terminal(&x).unwrap_or(f64::NAN);
            for v in b.iter().chain(&s).chain([f, phi].iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Returns a copy with a different control set.
    pub fn with_controls(&self, controls: ControlSet) -> Self {
        let mut p = self.clone();
        p.controls = controls;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_discretization_includes_endpoints() {
        let c = ControlSet::boxed(&[1.0], &[2.0], &[11]).unwrap();
        assert_eq!(c.len(), 11);
        assert_eq!(c.point(0), &[1.0]);
        assert_eq!(c.point(10), &[2.0]);
        let c2 = ControlSet::boxed(&[0.0, -1.0], &[1.0, 1.0], &[2, 3]).unwrap();
        assert_eq!(c2.len(), 6);
        assert_eq!(c2.point(1), &[0.0, 0.0]);
        assert_eq!(c2.point(5), &[1.0, 1.0]);
    }

    #[test]
    fn control_set_validation() {
        assert!(ControlSet::boxed(&[1.0], &[2.0], &[1]).is_err());
        assert!(ControlSet::boxed(&[2.0], &[1.0], &[3]).is_err());
        assert!(ControlSet::finite(vec![]).is_err());
        assert!(ControlSet::finite(vec![vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn monotone_regime_needs_positive_betas() {
        let mut p = builtin("identity", &Default::default()).unwrap();
        p.regime = Regime::Monotone;
        assert!(matches!(p.validate(), Err(ModelError::InvalidRegime(_))));
    }
}
