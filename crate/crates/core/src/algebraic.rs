//! The algebraic part of the generalized HJB system.
//!
//! For a gradient `p` the unknown `V` solves `V = p . sigma(t, x, w, V, u)`
//! (with `m = 1`, `p . sigma` is a `d`-vector). The map is a contraction with
//! factor `q = |p| L_sigma` when `q < 1`; otherwise a damped iteration is
//! tried and abandoned on stall.

use thiserror::Error;

use crate::exprdsl::EvalError;
use crate::model::{Coefficients, ControlProblem, Point};

pub const DEFAULT_TOL: f64 = 1e-12;
const STALL_WINDOW: usize = 100;
const MAX_DAMPED: usize = 100_000;

#[derive(Debug, Error)]
pub enum AlgebraicError {
    #[error("algebraic equation not contractive (q = {q}); damped iteration stalled at residual {residual:e} after {iterations} steps")]
    NoContraction {
        q: f64,
        residual: f64,
        iterations: usize,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraicSolution {
    pub v: Vec<f64>,
    /// `|V - p . sigma(.., V, ..)|` at the returned `V`.
    pub residual: f64,
    pub iterations: usize,
    pub contraction_q: f64,
    /// The damped fallback produced the answer.
    pub damped: bool,
}

/// `z -> p . sigma(t, x, w, z, u)` for one problem.
#[derive(Debug, Clone, Copy)]
pub struct SigmaMap<'a> {
    coefficients: &'a dyn Coefficients,
    n: usize,
    d: usize,
    l_sigma: f64,
}

impl<'a> SigmaMap<'a> {
    /// Uses the declared `L_sigma`, or 0 when `sigma` ignores `z`.
    pub fn new(problem: &'a ControlProblem) -> Self {
        let l = if problem.dependence().sigma_on_z {
            problem.structure.l_sigma
        } else {
            0.0
        };
        Self::from_parts(problem.coefficients.as_ref(), problem.n, problem.d, l)
    }

    pub fn from_parts(
        coefficients: &'a dyn Coefficients,
        n: usize,
        d: usize,
        l_sigma: f64,
    ) -> Self {
        Self {
            coefficients,
            n,
            d,
            l_sigma,
        }
    }

    pub fn with_l_sigma(mut self, l_sigma: f64) -> Self {
        self.l_sigma = l_sigma;
        self
    }

    pub fn l_sigma(&self) -> f64 {
        self.l_sigma
    }

    pub fn contraction_q(&self, p: &[f64]) -> f64 {
        norm(p) * self.l_sigma
    }

    /// `out = offset + p . sigma(t, x, w, z, u)`.
    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        p: &[f64],
        t: f64,
        x: &[f64],
        w: f64,
        z: &[f64],
        u: &[f64],
        offset: Option<&[f64]>,
        sig: &mut [f64],
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        self.coefficients
            .diffusion(&Point { t, x, y: w, z, u }, sig)?;
        for j in 0..self.d {
            let mut acc = offset.map_or(0.0, |o| o[j]);
            for i in 0..self.n {
                acc += p[i] * sig[i * self.d + j];
            }
            out[j] = acc;
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Residual threshold giving `|V - V*| <= tol` for a `q`-contraction.
fn stopping_residual(q: f64, tol: f64) -> f64 {
    if q < 1.0 {
        tol * (1.0 - q)
    } else {
        tol
    }
}

/// Upper bound on iterations of the plain scheme when `q < 1`.
pub fn iteration_bound(q: f64, initial_gap: f64, tol: f64) -> usize {
    let stop = stopping_residual(q, tol);
    if initial_gap <= stop || q <= 0.0 {
        return 2;
    }
    ((stop / initial_gap).ln() / q.ln()).ceil().max(0.0) as usize + 2
}

fn fixed_point(
    mut map: impl FnMut(&[f64], &mut [f64]) -> Result<(), EvalError>,
    start: Vec<f64>,
    q: f64,
    tol: f64,
) -> Result<AlgebraicSolution, AlgebraicError> {
    let d = start.len();
    let mut v = start;
    let mut next = vec![0.0; d];
    let stop = stopping_residual(q, tol);
    let accept = |v: &[f64], r: f64| r <= stop.max(4.0 * f64::EPSILON * norm(v));

    map(&v, &mut next)?;
    let gap = dist(&v, &next);
    let mut k = 0usize;
    if q < 1.0 {
        let cap = iteration_bound(q, gap, tol) + 1000;
        loop {
            let r = dist(&v, &next);
            if accept(&v, r) {
                return Ok(AlgebraicSolution {
                    v,
                    residual: r,
                    iterations: k + 1,
                    contraction_q: q,
                    damped: false,
                });
            }
            if k >= cap {
                break;
            }
            std::mem::swap(&mut v, &mut next);
            map(&v, &mut next)?;
            k += 1;
        }
    }

    let theta = 0.5 / (1.0 + q.max(0.0));
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    loop {
        let r = dist(&v, &next);
        if accept(&v, r) {
            return Ok(AlgebraicSolution {
                v,
                residual: r,
                iterations: k + 1,
                contraction_q: q,
                damped: true,
            });
        }
        if r < best {
            best = r;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= STALL_WINDOW || k >= MAX_DAMPED || !r.is_finite() {
            return Err(AlgebraicError::NoContraction {
                q,
                residual: r,
                iterations: k + 1,
            });
        }
        for j in 0..d {
            v[j] = (1.0 - theta) * v[j] + theta * next[j];
        }
        map(&v, &mut next)?;
        k += 1;
    }
}

/// Solve `V = p . sigma(t, x, w, V, u)` starting from `V_0 = p . sigma(.., 0, ..)`.
///
/// For `q < 1` iteration stops once the residual is below `tol (1 - q)`, so
/// the returned `V` is within `tol` of the fixed point.
#[allow(clippy::too_many_arguments)]
pub fn solve_v(
    sigma: &SigmaMap<'_>,
    p: &[f64],
    t: f64,
    x: &[f64],
    w: f64,
    u: &[f64],
    tol: f64,
) -> Result<AlgebraicSolution, AlgebraicError> {
    let mut sig = vec![0.0; sigma.n * sigma.d];
    let mut v0 = vec![0.0; sigma.d];
    let zero = vec![0.0; sigma.d];
    sigma.apply(p, t, x, w, &zero, u, None, &mut sig, &mut v0)?;
    solve_v_from(sigma, p, t, x, w, u, v0, tol)
}

/// As [`solve_v`] with an explicit starting point.
#[allow(clippy::too_many_arguments)]
pub fn solve_v_from(
    sigma: &SigmaMap<'_>,
    p: &[f64],
    t: f64,
    x: &[f64],
    w: f64,
    u: &[f64],
    start: Vec<f64>,
    tol: f64,
) -> Result<AlgebraicSolution, AlgebraicError> {
    let mut sig = vec![0.0; sigma.n * sigma.d];
    let q = sigma.contraction_q(p);
    fixed_point(
        |z, out| sigma.apply(p, t, x, w, z, u, None, &mut sig, out),
        start,
        q,
        tol,
    )
}

/// Smooth test function with a spatial gradient.
pub trait TestFunction: Sync {
    fn value(&self, s: f64, x: &[f64]) -> f64;
    fn gradient(&self, s: f64, x: &[f64], out: &mut [f64]);
}

/// `phi(t, x) = c0 + a (t - t0) + c1 . (x - x0) + 1/2 (x - x0)' c2 (x - x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub c0: f64,
    pub a: f64,
    pub c1: Vec<f64>,
    /// Symmetric `n x n`, row-major.
    pub c2: Vec<f64>,
}

impl TestFunction for Quadratic {
    fn value(&self, s: f64, x: &[f64]) -> f64 {
        let n = self.x0.len();
        let mut v = self.c0 + self.a * (s - self.t0);
        for i in 0..n {
            let di = x[i] - self.x0[i];
            v += self.c1[i] * di;
            for j in 0..n {
                v += 0.5 * di * self.c2[i * n + j] * (x[j] - self.x0[j]);
            }
        }
        v
    }

    fn gradient(&self, _s: f64, x: &[f64], out: &mut [f64]) {
        let n = self.x0.len();
        for i in 0..n {
            out[i] = self.c1[i];
            for j in 0..n {
                out[i] += self.c2[i * n + j] * (x[j] - self.x0[j]);
            }
        }
    }
}

/// The `z` solving `z = zeta + Dphi(s, x) . sigma(s, x, y + phi(s, x), z, u)`.
#[allow(clippy::too_many_arguments)]
pub fn representation_h(
    sigma: &SigmaMap<'_>,
    s: f64,
    x_bar: &[f64],
    y: f64,
    zeta: &[f64],
    u: &[f64],
    testfn: &dyn TestFunction,
    tol: f64,
) -> Result<AlgebraicSolution, AlgebraicError> {
    let mut p = vec![0.0; sigma.n];
    testfn.gradient(s, x_bar, &mut p);
    let w = y + testfn.value(s, x_bar);
    let q = sigma.contraction_q(&p);
    let mut sig = vec![0.0; sigma.n * sigma.d];
    let mut z0 = vec![0.0; sigma.d];
    let zero = vec![0.0; sigma.d];
    sigma.apply(&p, s, x_bar, w, &zero, u, Some(zeta), &mut sig, &mut z0)?;
    fixed_point(
        |z, out| sigma.apply(&p, s, x_bar, w, z, u, Some(zeta), &mut sig, out),
        z0,
        q,
        tol,
    )
}
