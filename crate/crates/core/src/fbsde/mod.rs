//! Brownian ensembles and the controlled fully coupled FBSDE
//!
//! ```text
//! dX = b(s, X, Y, Z, u) ds + sigma(s, X, Y, Z, u) dB,   X_t = x
//! dY = -f(s, X, Y, Z, u) ds + Z dB,                      Y_T = Phi(X_T)
//! ```
//!
//! solved by Picard sweeps of Euler-Maruyama forward passes and
//! least-squares Monte Carlo backward passes.

mod paths;
pub mod regression;
mod solver;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::exprdsl::EvalError;

pub use paths::{generate_paths, PathEnsemble, TimeGrid};
pub use regression::RegressionOptions;
pub use solver::{
    backward_semigroup, cost_functional, semigroup_solution, solve_fbsde, FbsdeOptions,
    FbsdeSolution, Terminal,
};

#[derive(Debug, Error)]
pub enum FbsdeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("time step {dt} exceeds the certified step cap {delta0}")]
    StepTooLarge { dt: f64, delta0: f64 },
    #[error("Picard iteration did not converge; residuals {residuals:?}")]
    NotConverged { residuals: Vec<f64> },
    #[error("regression Gram matrix is rank deficient at node {node}")]
    RegressionSingular { node: usize },
    #[error("control index {index} outside the control set of size {len}")]
    ControlOutOfRange { index: usize, len: usize },
    #[error("coefficient evaluation failed at t = {t}, x = {x:?}: {source}")]
    Eval {
        t: f64,
        x: Vec<f64>,
        #[source]
        source: EvalError,
    },
}

/// Feedback rule `(step, t, x) -> control index`.
pub type FeedbackRule = Arc<dyn Fn(usize, f64, &[f64]) -> usize + Send + Sync>;

/// Piecewise-constant control, given by indices into the control set.
#[derive(Clone)]
pub enum ControlProcess {
    Constant(usize),
    /// One index per time step.
    OpenLoop(Vec<usize>),
    Feedback(FeedbackRule),
}

impl fmt::Debug for ControlProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlProcess::Constant(i) => write!(f, "Constant({i})"),
            ControlProcess::OpenLoop(v) => write!(f, "OpenLoop({v:?})"),
            ControlProcess::Feedback(_) => write!(f, "Feedback(..)"),
        }
    }
}

impl ControlProcess {
    #[inline]
    pub fn index(&self, step: usize, t: f64, x: &[f64]) -> usize {
        match self {
            ControlProcess::Constant(i) => *i,
            ControlProcess::OpenLoop(v) => v[step],
            ControlProcess::Feedback(rule) => rule(step, t, x),
        }
    }

    fn validate(&self, len: usize, steps: usize) -> Result<(), FbsdeError> {
        match self {
            ControlProcess::Constant(i) if *i >= len => {
                Err(FbsdeError::ControlOutOfRange { index: *i, len })
            }
            ControlProcess::OpenLoop(v) => {
                if v.len() != steps {
                    return Err(FbsdeError::InvalidInput(format!(
                        "open-loop control has {} entries for {steps} steps",
                        v.len()
                    )));
                }
                match v.iter().find(|i| **i >= len) {
                    Some(i) => Err(FbsdeError::ControlOutOfRange { index: *i, len }),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}
