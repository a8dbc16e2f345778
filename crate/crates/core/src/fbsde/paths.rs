use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FbsdeError;
use crate::rng::substream;

/// Uniform grid `t_i = t0 + i (t1 - t0) / steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self, FbsdeError> {
        if !(t0.is_finite() && t1.is_finite() && t0 < t1) {
            return Err(FbsdeError::InvalidInput(format!(
                "time grid needs t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if steps == 0 {
            return Err(FbsdeError::InvalidInput(
                "time grid needs at least one step".into(),
            ));
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    /// Node `i`; the last node is `t1` exactly.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t1
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
}

/// Brownian increments, stored path-major: `increment(i, p)` is the
/// `d`-vector for step `i` of path `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub antithetic: bool,
    increments: Vec<f64>,
}

/// Paths (or antithetic pairs) drawn from one random stream.
const BLOCK: usize = 64;

impl PathEnsemble {
    #[inline]
    pub fn increment(&self, i: usize, p: usize) -> &[f64] {
        let o = (p * self.grid.steps + i) * self.d;
        &self.increments[o..o + self.d]
    }

    /// All increments of path `p`, step-major.
    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.grid.steps * self.d;
        &self.increments[p * len..(p + 1) * len]
    }
}

/// Draw `m` paths of `d`-dimensional increments `N(0, dt I)`.
///
/// Draws come in blocks of 64 paths (or pairs) per substream, so the result
/// does not depend on the worker count and a larger `m` extends a smaller one.
pub fn generate_paths(
    grid: TimeGrid,
    d: usize,
    m: usize,
    seed: u64,
    antithetic: bool,
) -> Result<PathEnsemble, FbsdeError> {
    if m < 2 {
        return Err(FbsdeError::InvalidInput("need at least 2 paths".into()));
    }
    if d == 0 {
        return Err(FbsdeError::InvalidInput(
            "Brownian dimension must be positive".into(),
        ));
    }
    if antithetic && m % 2 != 0 {
        return Err(FbsdeError::InvalidInput(
            "antithetic ensembles need an even path count".into(),
        ));
    }
    let len = grid.steps * d;
    let sd = grid.dt().sqrt();
    let units = if antithetic { m / 2 } else { m };
    let per_unit = if antithetic { 2 * len } else { len };
    let mut increments = vec![0.0; m * len];
    increments
        .par_chunks_mut(BLOCK * per_unit)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = substream(seed, "paths", &[b as u64]);
            for unit in chunk.chunks_mut(per_unit) {
                let (first, rest) = unit.split_at_mut(len);
                for v in first.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = sd * g;
                }
                if antithetic {
                    for (r, f) in rest.iter_mut().zip(first.iter()) {
                        *r = -*f;
                    }
                }
            }
        });
    debug_assert_eq!(units * per_unit, increments.len());
    Ok(PathEnsemble {
        grid,
        d,
        m,
        seed,
        antithetic,
        increments,
    })
}
