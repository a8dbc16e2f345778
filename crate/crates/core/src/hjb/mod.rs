//! Generalized HJB equation with its nested algebraic equation,
//!
//! ```text
//! W_t + sup_u { DW . b(t,x,W,V,u) + 1/2 tr(sigma sigma^T D2W) + f(t,x,W,V,u) } = 0
//! V(t,x,u) = DW . sigma(t,x,W,V,u),        W(T,x) = Phi(x),
//! ```
//!
//! solved backward in time by an explicit finite-difference scheme.

mod grid;
mod surface;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebraic::{solve_v, AlgebraicError, SigmaMap, DEFAULT_TOL};
use crate::exprdsl::{Bindings, EvalError};
use crate::fbsde::TimeGrid;
use crate::model::ControlProblem;

pub use grid::{SpaceGrid, MIN_NODES};
pub use surface::{SurfaceMeta, ValueSurface};

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("CFL factor {factor:.3} exceeds the limit at t = {t}, x = {x:?}")]
    CflViolation { t: f64, x: Vec<f64>, factor: f64 },
    #[error("algebraic equation not contractive at t = {t}, x = {x:?}, control {u}: q = {q}")]
    NoContraction {
        t: f64,
        x: Vec<f64>,
        u: usize,
        q: f64,
    },
    #[error("non-finite value at t = {t}, x = {x:?}")]
    NonFinite { t: f64, x: Vec<f64> },
    #[error("coefficient evaluation failed at t = {t}, x = {x:?}: {source}")]
    Eval {
        t: f64,
        x: Vec<f64>,
        #[source]
        source: EvalError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbOptions {
    /// One-sided differences for the drift term, chosen by the sign of `b`.
    pub upwind: bool,
    /// CFL factor used to pick the step count.
    pub cfl_target: f64,
    /// Largest CFL factor tolerated at any step.
    pub cfl_max: f64,
    /// Algebraic tolerance.
    pub tol: f64,
}

impl Default for HjbOptions {
    fn default() -> Self {
        Self {
            upwind: false,
            cfl_target: 0.45,
            cfl_max: 0.9,
            tol: DEFAULT_TOL,
        }
    }
}

/// Maximized Hamiltonian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub h: f64,
    pub u_star: usize,
    pub v_star: Vec<f64>,
    /// `max_u 1/2 tr(sigma sigma^T)`.
    pub diffusion_rate: f64,
    /// `max_u |b|`.
    pub drift_rate: f64,
}

/// One-sided first differences for the upwinded drift term.
struct Upwind<'a> {
    forward: &'a [f64],
    backward: &'a [f64],
}

#[allow(clippy::too_many_arguments)]
fn maximize(
    problem: &ControlProblem,
    sigma: &SigmaMap<'_>,
    t: f64,
    x: &[f64],
    w: f64,
    dw: &[f64],
    d2w: &[f64],
    upwind: Option<Upwind<'_>>,
    tol: f64,
) -> Result<Hamiltonian, HjbError> {
    let (n, d) = (problem.n, problem.d);
    let c = &problem.coefficients;
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    let mut best: Option<Hamiltonian> = None;
    let (mut diff_rate, mut drift_rate) = (0.0f64, 0.0f64);
    let eval_err = |source| HjbError::Eval {
        t,
        x: x.to_vec(),
        source,
    };
    for (k, u) in problem.controls.points().iter().enumerate() {
        let sol = solve_v(sigma, dw, t, x, w, u, tol).map_err(|e| match e {
            AlgebraicError::NoContraction { q, .. } => HjbError::NoContraction {
                t,
                x: x.to_vec(),
                u: k,
                q,
            },
            AlgebraicError::Eval(source) => eval_err(source),
        })?;
        let pt = Bindings {
            t,
            x,
            y: w,
            z: &sol.v,
            u,
        };
        c.drift(&pt, &mut b).map_err(eval_err)?;
        c.diffusion(&pt, &mut s).map_err(eval_err)?;
        let f = c.driver(&pt).map_err(eval_err)?;
        let adv: f64 = match &upwind {
            Some(up) => (0..n)
                .map(|a| {
                    b[a] * if b[a] > 0.0 {
                        up.forward[a]
                    } else {
                        up.backward[a]
                    }
                })
                .sum(),
            None => (0..n).map(|a| b[a] * dw[a]).sum(),
        };
        let mut diff = 0.0;
        let mut trace = 0.0;
        for a in 0..n {
            for e in 0..n {
                let aa: f64 = (0..d).map(|k| s[a * d + k] * s[e * d + k]).sum();
                diff += aa * d2w[e * n + a];
                if a == e {
                    trace += aa;
                }
            }
        }
        let score = adv + 0.5 * diff + f;
        diff_rate = diff_rate.max(0.5 * trace);
        drift_rate = drift_rate.max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
        if best.as_ref().is_none_or(|h| score > h.h) {
            best = Some(Hamiltonian {
                h: score,
                u_star: k,
                v_star: sol.v,
                diffusion_rate: 0.0,
                drift_rate: 0.0,
            });
        }
    }
    let mut h = best.expect("control set is nonempty");
    h.diffusion_rate = diff_rate;
    h.drift_rate = drift_rate;
    Ok(h)
}

/// `sup_u` of the Hamiltonian at `(t, x)` with value `w`, gradient `dw` and
/// Hessian `d2w` (row-major `n x n`). Ties go to the lowest control index.
pub fn hamiltonian(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    w: f64,
    dw: &[f64],
    d2w: &[f64],
    tol: f64,
) -> Result<Hamiltonian, HjbError> {
    let sigma = SigmaMap::new(problem);
    maximize(problem, &sigma, t, x, w, dw, d2w, None, tol)
}

/// Slice value with linearly extrapolated ghost nodes one cell outside.
fn ext(sp: &SpaceGrid, w: &[f64], idx: &[isize]) -> f64 {
    for a in 0..idx.len() {
        let c = sp.count[a] as isize;
        if idx[a] < 0 || idx[a] >= c {
            let (edge, inner) = if idx[a] < 0 { (0, 1) } else { (c - 1, c - 2) };
            let mut e = idx.to_vec();
            e[a] = edge;
            let mut i = idx.to_vec();
            i[a] = inner;
            return 2.0 * ext(sp, w, &e) - ext(sp, w, &i);
        }
    }
    let u: Vec<usize> = idx.iter().map(|&v| v as usize).collect();
    w[sp.flat(&u)]
}

/// Finite differences of a slice at node `j`.
pub struct Derivatives {
    pub dw: Vec<f64>,
    pub d2w: Vec<f64>,
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

pub fn derivatives(sp: &SpaceGrid, w: &[f64], j: usize) -> Derivatives {
    let n = sp.dim();
    let base: Vec<isize> = sp.multi(j).iter().map(|&v| v as isize).collect();
    let at = |shift: &[(usize, isize)]| {
        let mut idx = base.clone();
        for &(a, s) in shift {
            idx[a] += s;
        }
        ext(sp, w, &idx)
    };
    let w0 = w[j];
    let mut dw = vec![0.0; n];
    let mut d2w = vec![0.0; n * n];
    let mut forward = vec![0.0; n];
    let mut backward = vec![0.0; n];
    for a in 0..n {
        let h = sp.h(a);
        let (p, m) = (at(&[(a, 1)]), at(&[(a, -1)]));
        dw[a] = (p - m) / (2.0 * h);
        forward[a] = (p - w0) / h;
        backward[a] = (w0 - m) / h;
        d2w[a * n + a] = (p - 2.0 * w0 + m) / (h * h);
    }
    if n == 2 {
        let cross = (at(&[(0, 1), (1, 1)]) - at(&[(0, 1), (1, -1)]) - at(&[(0, -1), (1, 1)])
            + at(&[(0, -1), (1, -1)]))
            / (4.0 * sp.h(0) * sp.h(1));
        d2w[1] = cross;
        d2w[2] = cross;
    }
    Derivatives {
        dw,
        d2w,
        forward,
        backward,
    }
}

fn cfl_factor(sp: &SpaceGrid, dt: f64, h: &Hamiltonian) -> f64 {
    let hmin = sp.min_h();
    dt * (h.diffusion_rate * 2.0 * sp.dim() as f64 / (hmin * hmin) + h.drift_rate / hmin)
}

fn sweep(
    problem: &ControlProblem,
    sp: &SpaceGrid,
    t: f64,
    w: &[f64],
    opts: &HjbOptions,
) -> Result<Vec<Hamiltonian>, HjbError> {
    let sigma = SigmaMap::new(problem);
    (0..sp.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|j| {
            let x = sp.point(j);
            let dv = derivatives(sp, w, j);
            let up = opts.upwind.then_some(Upwind {
                forward: &dv.forward,
                backward: &dv.backward,
            });
            maximize(problem, &sigma, t, &x, w[j], &dv.dw, &dv.d2w, up, opts.tol)
        })
        .collect()
}

fn terminal_slice(problem: &ControlProblem, sp: &SpaceGrid) -> Result<Vec<f64>, HjbError> {
    (0..sp.len())
        .map(|j| {
            let x = sp.point(j);
            problem
                .coefficients
                .terminal(&x)
                .map_err(|source| HjbError::Eval {
                    t: problem.horizon,
                    x,
                    source,
                })
        })
        .collect()
}

fn check_space(problem: &ControlProblem, sp: &SpaceGrid) -> Result<(), HjbError> {
    if sp.dim() != problem.n {
        return Err(HjbError::InvalidGrid(format!(
            "grid has {} axes, state dimension is {}",
            sp.dim(),
            problem.n
        )));
    }
    Ok(())
}

/// Time grid on `[t0, T]` with the step count that puts the CFL factor of
/// the terminal slice at `opts.cfl_target`.
pub fn auto_time_grid(
    problem: &ControlProblem,
    sp: &SpaceGrid,
    t0: f64,
    opts: &HjbOptions,
) -> Result<TimeGrid, HjbError> {
    check_space(problem, sp)?;
    let span = problem.horizon - t0;
    if !(span > 0.0) {
        return Err(HjbError::InvalidGrid(format!(
            "start time {t0} is not before the horizon {}",
            problem.horizon
        )));
    }
    let w = terminal_slice(problem, sp)?;
    let hs = sweep(problem, sp, problem.horizon, &w, opts)?;
    let rate = hs
        .iter()
        .map(|h| cfl_factor(sp, 1.0, h))
        .fold(0.0, f64::max);
    let steps = ((span * rate / opts.cfl_target).ceil() as usize).max(1);
    TimeGrid::new(t0, problem.horizon, steps).map_err(|e| HjbError::InvalidGrid(e.to_string()))
}

pub fn solve_hjb(
    problem: &ControlProblem,
    sp: &SpaceGrid,
    time: TimeGrid,
    opts: &HjbOptions,
) -> Result<ValueSurface, HjbError> {
    check_space(problem, sp)?;
    if (time.t1 - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(HjbError::InvalidGrid(format!(
            "time grid ends at {}, horizon is {}",
            time.t1, problem.horizon
        )));
    }
    let mut meta = SurfaceMeta::new("hjb-explicit", &problem.name, &problem.fingerprint());
    meta.upwind = Some(opts.upwind);
    let (len, d, steps) = (sp.len(), problem.d, time.steps);
    let mut surf = ValueSurface::zeros(sp.clone(), time, d, meta);
    let mut u_star = vec![0usize; (steps + 1) * len];
    let mut v_star = vec![0.0; (steps + 1) * len * d];
    let terminal = terminal_slice(problem, sp)?;
    surf.slice_mut(steps).copy_from_slice(&terminal);
    let dt = time.dt();
    let mut cfl_max = 0.0f64;
    for i in (0..=steps).rev() {
        let t = time.node(i);
        let hs = sweep(problem, sp, t, surf.slice(i), opts)?;
        for (j, h) in hs.iter().enumerate() {
            u_star[i * len + j] = h.u_star;
            v_star[(i * len + j) * d..(i * len + j + 1) * d].copy_from_slice(&h.v_star);
        }
        if i == 0 {
            break;
        }
        for (j, h) in hs.iter().enumerate() {
            let factor = cfl_factor(sp, dt, h);
            cfl_max = cfl_max.max(factor);
            if factor > opts.cfl_max {
                return Err(HjbError::CflViolation {
                    t,
                    x: sp.point(j),
                    factor,
                });
            }
        }
        let (lo, hi) = surf.values.split_at_mut(i * len);
        let (prev, cur) = (&mut lo[(i - 1) * len..], &hi[..len]);
        for j in 0..len {
            let v = cur[j] + dt * hs[j].h;
            if !v.is_finite() {
                return Err(HjbError::NonFinite {
                    t: time.node(i - 1),
                    x: sp.point(j),
                });
            }
            prev[j] = v;
        }
    }
    surf.u_star = Some(u_star);
    surf.v_star = Some(v_star);
    surf.meta.cfl_max = Some(cfl_max);
    Ok(surf)
}

/// [`solve_hjb`] on `[0, T]` with the step count from [`auto_time_grid`].
pub fn solve_hjb_auto(
    problem: &ControlProblem,
    sp: &SpaceGrid,
    opts: &HjbOptions,
) -> Result<ValueSurface, HjbError> {
    let time = auto_time_grid(problem, sp, 0.0, opts)?;
    solve_hjb(problem, sp, time, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, load_problem_str};
    use std::collections::BTreeMap;

    fn problem(name: &str) -> ControlProblem {
        builtin(name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn hamiltonian_examples() {
        let h = hamiltonian(
            &problem("identity"),
            0.3,
            &[0.7],
            0.7,
            &[1.0],
            &[0.0],
            1e-12,
        )
        .unwrap();
        assert_eq!(h.h, 0.0);

        let uv = problem("uncertain_vol");
        let h = hamiltonian(&uv, 0.0, &[0.0], 1.0, &[0.0], &[2.0], 1e-12).unwrap();
        assert!((h.h - 4.0).abs() < 1e-12);
        assert_eq!(uv.controls.point(h.u_star), &[2.0]);
        // All scores tie at zero curvature: lowest index wins.
        let h = hamiltonian(&uv, 0.0, &[0.0], 1.0, &[0.0], &[0.0], 1e-12).unwrap();
        assert_eq!(h.u_star, 0);

        let h = hamiltonian(
            &problem("zcoupled"),
            0.0,
            &[1.0],
            1.0,
            &[1.0],
            &[0.0],
            1e-12,
        )
        .unwrap();
        assert_eq!(h.h, 0.0);
        assert!((h.v_star[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_is_reproduced() {
        let p = problem("identity");
        let sp = SpaceGrid::cube(1, -5.0, 5.0, 101).unwrap();
        let s = solve_hjb_auto(&p, &sp, &HjbOptions::default()).unwrap();
        for j in 0..sp.len() {
            assert_eq!(s.value(s.steps(), j), sp.point(j)[0]);
            let x = sp.point(j)[0];
            if x.abs() <= 3.0 {
                assert!((s.value(0, j) - x).abs() <= 1e-3);
            }
        }
        assert!(s.meta.cfl_max.unwrap() <= 0.9);
    }

    #[test]
    fn zcoupled_value_and_algebraic_solution() {
        let p = problem("zcoupled");
        let sp = SpaceGrid::cube(1, -5.0, 5.0, 101).unwrap();
        let s = solve_hjb_auto(&p, &sp, &HjbOptions::default()).unwrap();
        for j in 2..sp.len() - 2 {
            let x = sp.point(j)[0];
            if x.abs() <= 3.0 {
                assert!((s.value(0, j) - x).abs() <= 1e-3);
            }
            for i in 0..=s.steps() {
                assert!((s.v_star_at(i, j).unwrap()[0] - 2.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn uncertain_vol_at_origin() {
        let p = problem("uncertain_vol");
        let sp = SpaceGrid::cube(1, -6.0, 6.0, 201).unwrap();
        let s = solve_hjb_auto(&p, &sp, &HjbOptions::default()).unwrap();
        let j = sp.flat(&[100]);
        assert!((s.value(0, j) - 4.0).abs() <= 0.05, "{}", s.value(0, j));
        assert_eq!(p.controls.point(s.u_star_at(0, j).unwrap()), &[2.0]);
    }

    #[test]
    fn upwinding_keeps_linear_solutions() {
        let p = problem("monotone_drift");
        let sp = SpaceGrid::cube(1, -5.0, 5.0, 81).unwrap();
        let opts = HjbOptions {
            upwind: true,
            ..Default::default()
        };
        let s = solve_hjb_auto(&p, &sp, &opts).unwrap();
        for j in 0..sp.len() {
            assert!((s.value(0, j) - sp.point(j)[0]).abs() < 1e-9);
        }
    }

    fn planar(phi: &str) -> ControlProblem {
        let cfg = format!(
            r#"
            [dims]
            n = 2
            d = 2
            horizon = 1.0
            [coefficients]
            b = ["0", "0"]
            sigma = ["1", "0", "0", "1"]
            f = "0"
            phi = "{phi}"
            [controls]
            points = [[0.0]]
            [structure]
            G = [1.0, 0.0]
            K = 1.0
            [regime]
            kind = "small-interval"
            "#
        );
        load_problem_str(&cfg).unwrap()
    }

    #[test]
    fn bilinear_terminal_data_is_harmonic_in_two_dimensions() {
        let p = planar("x1 * x2 + x1 - 2 * x2");
        let sp = SpaceGrid::cube(2, -2.0, 2.0, 21).unwrap();
        let s = solve_hjb_auto(&p, &sp, &HjbOptions::default()).unwrap();
        for j in 0..sp.len() {
            let x = sp.point(j);
            let exact = x[0] * x[1] + x[0] - 2.0 * x[1];
            assert!((s.value(0, j) - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_derivative_stencil() {
        let sp = SpaceGrid::cube(2, -1.0, 1.0, 9).unwrap();
        let w: Vec<f64> = (0..sp.len())
            .map(|j| {
                let x = sp.point(j);
                3.0 * x[0] * x[1] + x[0] * x[0]
            })
            .collect();
        let dv = derivatives(&sp, &w, sp.flat(&[4, 4]));
        assert!((dv.d2w[1] - 3.0).abs() < 1e-12 && (dv.d2w[2] - 3.0).abs() < 1e-12);
        assert!((dv.d2w[0] - 2.0).abs() < 1e-12);
        // Corners use doubly extrapolated ghosts; bilinear terms survive.
        let dv = derivatives(&sp, &w, sp.flat(&[0, 0]));
        assert!((dv.d2w[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let p = problem("identity");
        let sp = SpaceGrid::cube(1, -5.0, 5.0, 101).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert!(matches!(
            solve_hjb(&p, &sp, tg, &HjbOptions::default()),
            Err(HjbError::CflViolation { .. })
        ));
        let sp2 = SpaceGrid::cube(2, -5.0, 5.0, 11).unwrap();
        assert!(matches!(
            solve_hjb(&p, &sp2, tg, &HjbOptions::default()),
            Err(HjbError::InvalidGrid(_))
        ));
    }
}
