use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    Coefficients, ControlProblem, ControlSet, Dependence, ModelError, MonotoneStructure, Point,
    Regime,
};
use crate::exprdsl::EvalError;

/// Benchmark problems with known value functions (n = d = k = 1).
///
/// | name                  | b   | sigma      | f | Phi  | W(t,x)               |
/// |-----------------------|-----|------------|---|------|----------------------|
/// | `identity`            | 0   | 1          | 0 | x    | x                    |
/// | `monotone_drift`      | -y  | 1          | x | x    | x                    |
/// | `uncertain_vol`       | 0   | u          | 0 | x^2  | x^2 + u_max^2 (T-t)  |
/// | `zcoupled`            | 0   | 1 + eps z  | 0 | x    | x                    |
/// | `zcoupled_controlled` | 0   | u + eps z  | 0 | x    | x                    |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Builtin {
    Identity,
    MonotoneDrift,
    UncertainVol,
    Zcoupled { epsilon: f64 },
    ZcoupledControlled { epsilon: f64 },
}

pub const BUILTIN_NAMES: [&str; 5] = [
    "identity",
    "monotone_drift",
    "uncertain_vol",
    "zcoupled",
    "zcoupled_controlled",
];

impl Builtin {
    pub fn name(&self) -> &'static str {
        match self {
            Builtin::Identity => "identity",
            Builtin::MonotoneDrift => "monotone_drift",
            Builtin::UncertainVol => "uncertain_vol",
            Builtin::Zcoupled { .. } => "zcoupled",
            Builtin::ZcoupledControlled { .. } => "zcoupled_controlled",
        }
    }

    pub fn all_names() -> &'static [&'static str] {
        &BUILTIN_NAMES
    }

    /// Closed-form `W(t, x)`.
    pub fn value(&self, t: f64, x: &[f64], horizon: f64, controls: &ControlSet) -> Option<f64> {
        let x = x[0];
        Some(match self {
            Builtin::UncertainVol => {
                let umax = controls
                    .points()
                    .iter()
                    .map(|p| p[0] * p[0])
                    .fold(0.0, f64::max);
                x * x + umax * (horizon - t)
            }
            _ => x,
        })
    }

    /// Closed-form `Z` along the optimal path, where it is constant.
    pub fn z_constant(&self) -> Option<f64> {
        match self {
            Builtin::Identity | Builtin::MonotoneDrift => Some(1.0),
            Builtin::Zcoupled { epsilon } => Some(1.0 / (1.0 - epsilon)),
            _ => None,
        }
    }
}

impl Coefficients for Builtin {
    fn drift(&self, p: &Point<'_>, out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = match self {
            Builtin::MonotoneDrift => -p.y,
            _ => 0.0,
        };
        Ok(())
    }

    fn diffusion(&self, p: &Point<'_>, out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = match *self {
            Builtin::Identity | Builtin::MonotoneDrift => 1.0,
            Builtin::UncertainVol => p.u[0],
            Builtin::Zcoupled { epsilon } => 1.0 + epsilon * p.z[0],
            Builtin::ZcoupledControlled { epsilon } => p.u[0] + epsilon * p.z[0],
        };
        Ok(())
    }

    fn driver(&self, p: &Point<'_>) -> Result<f64, EvalError> {
        Ok(match self {
            Builtin::MonotoneDrift => p.x[0],
            _ => 0.0,
        })
    }

    fn terminal(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(match self {
            Builtin::UncertainVol => x[0] * x[0],
            _ => x[0],
        })
    }

    fn dependence(&self) -> Dependence {
        match self {
            Builtin::MonotoneDrift => Dependence {
                drift_on_y: true,
                ..Default::default()
            },
            Builtin::Zcoupled { .. } | Builtin::ZcoupledControlled { .. } => Dependence {
                sigma_on_z: true,
                ..Default::default()
            },
            _ => Dependence::default(),
        }
    }
}

fn take(params: &mut BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.remove(key).unwrap_or(default)
}

/// Instantiate a named benchmark.
///
/// Recognized parameters: `T` (horizon, default 1), `epsilon` (default 0.5,
/// `|epsilon| < 1`), and for boxed controls `u_lo`, `u_hi`, `u_count`
/// (defaults 1, 2, 11).
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<ControlProblem, ModelError> {
    let mut params = params.clone();
    let horizon = take(&mut params, "T", 1.0);
    let kind = match name {
        "identity" => Builtin::Identity,
        "monotone_drift" => Builtin::MonotoneDrift,
        "uncertain_vol" => Builtin::UncertainVol,
        "zcoupled" | "zcoupled_controlled" => {
            let epsilon = take(&mut params, "epsilon", 0.5);
            if !(epsilon.abs() < 1.0) {
                return Err(ModelError::ParameterOutOfRange {
                    name: "epsilon".into(),
                    value: epsilon,
                    reason: "need |epsilon| < 1".into(),
                });
            }
            if name == "zcoupled" {
                Builtin::Zcoupled { epsilon }
            } else {
                Builtin::ZcoupledControlled { epsilon }
            }
        }
        other => return Err(ModelError::UnknownBuiltin(other.to_string())),
    };
    let controls = match kind {
        Builtin::UncertainVol | Builtin::ZcoupledControlled { .. } => {
            let lo = take(&mut params, "u_lo", 1.0);
            let hi = take(&mut params, "u_hi", 2.0);
            let count = take(&mut params, "u_count", 11.0);
            if count.fract() != 0.0 || count < 2.0 {
                return Err(ModelError::ParameterOutOfRange {
                    name: "u_count".into(),
                    value: count,
                    reason: "must be an integer >= 2".into(),
                });
            }
            ControlSet::boxed(&[lo], &[hi], &[count as usize])?
        }
        _ => ControlSet::finite(vec![vec![0.0]])?,
    };
    if let Some((k, v)) = params.into_iter().next() {
        return Err(ModelError::ParameterOutOfRange {
            name: k,
            value: v,
            reason: format!("not a parameter of builtin {name}"),
        });
    }
    let (structure, regime) = match kind {
        Builtin::MonotoneDrift => (
            MonotoneStructure {
                g: vec![1.0],
                beta1: 1.0,
                beta2: 0.0,
                mu1: 1.0,
                k_lip: 1.0,
                l_sigma: 0.0,
            },
            Regime::Monotone,
        ),
        Builtin::Identity => (
            MonotoneStructure {
                mu1: 1.0,
                ..MonotoneStructure::trivial(1, 1.0, 0.0)
            },
            Regime::SmallInterval,
        ),
        // Phi = x^2 is only Lipschitz on bounded sets; K is the bound on [-5, 5].
        Builtin::UncertainVol => (
            MonotoneStructure::trivial(1, 10.0, 0.0),
            Regime::SmallInterval,
        ),
        Builtin::Zcoupled { epsilon } | Builtin::ZcoupledControlled { epsilon } => (
            MonotoneStructure {
                mu1: 1.0,
                ..MonotoneStructure::trivial(1, 1.0, epsilon.abs())
            },
            Regime::SmallInterval,
        ),
    };
    let problem = ControlProblem {
        name: name.to_string(),
        n: 1,
        d: 1,
        horizon,
        coefficients: Arc::new(kind),
        controls,
        structure,
        regime,
        builtin: Some(kind),
    };
    problem.validate()?;
    Ok(problem)
}
