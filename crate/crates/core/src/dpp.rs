//! Value function by backward dynamic programming over the backward
//! semigroup: on each step `[t_i, t_{i+1}]` and for each constant control,
//! the semigroup is applied to the interpolant of `W(t_{i+1}, .)`; the value
//! is the largest result over the control set.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprdsl::EvalError;
use crate::fbsde::{
    generate_paths, semigroup_solution, solve_fbsde, ControlProcess, FbsdeError, FbsdeOptions,
    PathEnsemble, TimeGrid,
};
use crate::hjb::{SpaceGrid, SurfaceMeta, ValueSurface};
use crate::model::ControlProblem;
use crate::rng::substream_seed;

#[derive(Debug, Error)]
pub enum DppError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("step {dt} exceeds the certified cap {delta0}")]
    StepTooLarge { dt: f64, delta0: f64 },
    #[error("solver failed at step {step}, node {node}, control {control}: {source}")]
    Solver {
        step: usize,
        node: usize,
        control: usize,
        #[source]
        source: FbsdeError,
    },
    #[error("terminal evaluation failed at x = {x:?}: {source}")]
    Terminal {
        x: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    /// Paths per (node, control); rounded up to even when antithetic.
    pub paths: usize,
    pub antithetic: bool,
    pub seed: u64,
    /// FBSDE time steps inside one dynamic programming step.
    pub substeps: usize,
    /// Certified step cap; `None` skips the check.
    pub delta0: Option<f64>,
    pub fbsde: FbsdeOptions,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            paths: 4096,
            antithetic: true,
            seed: 42,
            substeps: 1,
            delta0: None,
            fbsde: FbsdeOptions::default(),
        }
    }
}

impl MonteCarloOptions {
    fn path_count(&self) -> usize {
        if self.antithetic {
            self.paths.div_ceil(2) * 2
        } else {
            self.paths
        }
    }
}

/// Ensemble shared by all controls at `(step, node)`.
pub fn node_ensemble(
    opts: &MonteCarloOptions,
    grid: TimeGrid,
    d: usize,
    step: usize,
    node: usize,
) -> Result<PathEnsemble, FbsdeError> {
    let seed = substream_seed(opts.seed, "dpp", &[step as u64, node as u64]);
    generate_paths(grid, d, opts.path_count(), seed, opts.antithetic)
}

/// Result of the best control at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeValue {
    pub value: f64,
    pub control: usize,
    pub stderr: f64,
}

/// `max_u G[psi]` over constant controls on `[t, t + delta]`, with the
/// standard error of the maximizer. `psi_err(x)` is the standard error
/// already carried by `psi`, combined in quadrature.
#[allow(clippy::too_many_arguments)]
fn best_control(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    delta: f64,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    psi_err: &(dyn Fn(&[f64]) -> f64 + Sync),
    ens: &PathEnsemble,
    opts: &MonteCarloOptions,
    step: usize,
    node: usize,
) -> Result<NodeValue, DppError> {
    let grid = ens.grid;
    let terminal = |y: &[f64]| -> Result<f64, EvalError> { Ok(psi(y)) };
    let mut best: Option<NodeValue> = None;
    for k in 0..problem.controls.len() {
        let sol = semigroup_solution(
            problem,
            t,
            x,
            delta,
            &ControlProcess::Constant(k),
            &terminal,
            grid,
            ens,
            &opts.fbsde,
        )
        .map_err(|source| DppError::Solver {
            step,
            node,
            control: k,
            source,
        })?;
        if best.is_none_or(|b| sol.j > b.value) {
            let carried = (0..sol.m)
                .map(|p| psi_err(sol.x_at(grid.steps, p)).powi(2))
                .sum::<f64>()
                / sol.m as f64;
            best = Some(NodeValue {
                value: sol.j,
                control: k,
                stderr: (sol.stderr.powi(2) + carried).sqrt(),
            });
        }
    }
    Ok(best.expect("control set is nonempty"))
}

fn check_inputs(
    problem: &ControlProblem,
    sp: &SpaceGrid,
    time: TimeGrid,
    opts: &MonteCarloOptions,
) -> Result<(), DppError> {
    if sp.dim() != problem.n {
        return Err(DppError::InvalidInput(format!(
            "grid has {} axes, state dimension is {}",
            sp.dim(),
            problem.n
        )));
    }
    if (time.t1 - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(DppError::InvalidInput(format!(
            "time grid ends at {}, horizon is {}",
            time.t1, problem.horizon
        )));
    }
    if opts.substeps == 0 || opts.path_count() < 2 {
        return Err(DppError::InvalidInput(
            "need substeps >= 1 and at least 2 paths".into(),
        ));
    }
    if let Some(delta0) = opts.delta0 {
        if time.dt() > delta0 * (1.0 + 1e-12) {
            return Err(DppError::StepTooLarge {
                dt: time.dt(),
                delta0,
            });
        }
    }
    Ok(())
}

pub fn value_iteration(
    problem: &ControlProblem,
    sp: &SpaceGrid,
    time: TimeGrid,
    opts: &MonteCarloOptions,
) -> Result<ValueSurface, DppError> {
    check_inputs(problem, sp, time, opts)?;
    let mut meta = SurfaceMeta::new("dpp", &problem.name, &problem.fingerprint());
    meta.paths_per_node = Some(opts.path_count());
    meta.seed = Some(opts.seed);
    let (len, steps) = (sp.len(), time.steps);
    let mut surf = ValueSurface::zeros(sp.clone(), time, problem.d, meta);
    let mut u_star = vec![0usize; (steps + 1) * len];
    let mut stderr = vec![0.0; (steps + 1) * len];
    for j in 0..len {
        let x = sp.point(j);
        let v = problem
            .coefficients
            .terminal(&x)
            .map_err(|source| DppError::Terminal { x, source })?;
        surf.values[steps * len + j] = v;
    }
    let outside = AtomicU64::new(0);
    for i in (0..steps).rev() {
        let (t, delta) = (time.node(i), time.node(i + 1) - time.node(i));
        let grid = TimeGrid::new(t, t + delta, opts.substeps)?;
        let next = surf.slice(i + 1).to_vec();
        let next_err = stderr[(i + 1) * len..(i + 2) * len].to_vec();
        let psi = |y: &[f64]| {
            if !sp.contains(y) {
                outside.fetch_add(1, Ordering::Relaxed);
            }
            ValueSurface::interp_nodal(sp, &next, y)
        };
        let psi_err = |y: &[f64]| ValueSurface::interp_nodal_err(sp, &next_err, y);
        let nodes: Vec<NodeValue> = (0..len)
            .into_par_iter()
            .map(|j| {
                let ens = node_ensemble(opts, grid, problem.d, i, j)?;
                best_control(
                    problem,
                    t,
                    &sp.point(j),
                    delta,
                    &psi,
                    &psi_err,
                    &ens,
                    opts,
                    i,
                    j,
                )
            })
            .collect::<Result<_, _>>()?;
        for (j, nv) in nodes.iter().enumerate() {
            surf.values[i * len + j] = nv.value;
            u_star[i * len + j] = nv.control;
            stderr[i * len + j] = nv.stderr;
        }
    }
    // The terminal slice has no decision; repeat the last one for replay.
    let (head, tail) = u_star.split_at_mut(steps * len);
    tail.copy_from_slice(&head[(steps - 1) * len..]);
    let outside = outside.into_inner();
    if outside > 0 {
        log::warn!("{outside} path endpoints fell outside the grid and were extrapolated");
    }
    surf.u_star = Some(u_star);
    surf.stderr = Some(stderr);
    surf.meta.out_of_domain = Some(outside);
    Ok(surf)
}

/// `W(t, x) - max_u G_{t, t + delta}[W(t + delta, .)]` and its standard error.
pub fn dpp_residual(
    problem: &ControlProblem,
    surface: &ValueSurface,
    t: f64,
    x: &[f64],
    delta: f64,
    opts: &MonteCarloOptions,
) -> Result<(f64, f64), DppError> {
    if !(delta > 0.0) || t + delta > problem.horizon * (1.0 + 1e-12) {
        return Err(DppError::InvalidInput(format!(
            "need 0 < delta and t + delta <= T, got t = {t}, delta = {delta}"
        )));
    }
    if !surface.space.contains(x) || t < surface.time.t0 {
        return Err(DppError::InvalidInput(format!(
            "(t, x) = ({t}, {x:?}) lies outside the surface"
        )));
    }
    if let Some(delta0) = opts.delta0 {
        if delta > delta0 * (1.0 + 1e-12) {
            return Err(DppError::StepTooLarge { dt: delta, delta0 });
        }
    }
    let grid = TimeGrid::new(t, t + delta, opts.substeps.max(1))?;
    let seed = substream_seed(opts.seed, "dpp-residual", &[]);
    let ens = generate_paths(grid, problem.d, opts.path_count(), seed, opts.antithetic)?;
    let psi = |y: &[f64]| surface.interp(t + delta, y);
    let psi_err = |y: &[f64]| match &surface.stderr {
        Some(se) => {
            let r = ((t + delta - surface.time.t0) / surface.time.dt()).round() as usize;
            let r = r.min(surface.steps());
            let len = surface.space.len();
            ValueSurface::interp_nodal_err(&surface.space, &se[r * len..(r + 1) * len], y)
        }
        None => 0.0,
    };
    let nv = best_control(problem, t, x, delta, &psi, &psi_err, &ens, opts, 0, 0)?;
    let lhs = surface.interp(t, x);
    Ok((lhs - nv.value, nv.stderr))
}

/// Feedback rule playing the stored maximizer of the nearest node of the
/// slice at or before the current time.
pub fn feedback_from_surface(surface: &ValueSurface) -> Result<ControlProcess, DppError> {
    let Some(u_star) = surface.u_star.clone() else {
        return Err(DppError::InvalidInput(
            "surface carries no maximizing controls".into(),
        ));
    };
    let surf = Arc::new(surface.clone());
    let u_star = Arc::new(u_star);
    let rule = move |_: usize, s: f64, y: &[f64]| {
        let r = ((s - surf.time.t0) / surf.time.dt()).floor().max(0.0) as usize;
        let i = r.min(surf.steps() - 1);
        u_star[surf.index(i, surf.nearest_node(y))]
    };
    Ok(ControlProcess::Feedback(Arc::new(rule)))
}

/// Cost of the feedback policy that plays the stored maximizer of the
/// nearest node, from `(t, x)` on the ensemble's grid.
pub fn optimal_control_replay(
    problem: &ControlProblem,
    surface: &ValueSurface,
    t: f64,
    x: &[f64],
    ensemble: &PathEnsemble,
    opts: &FbsdeOptions,
) -> Result<(f64, f64), DppError> {
    let control = feedback_from_surface(surface)?;
    let sol = solve_fbsde(problem, &control, t, x, ensemble.grid, ensemble, opts)?;
    Ok((sol.j, sol.stderr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::cost_functional;
    use crate::model::builtin;
    use std::collections::BTreeMap;

    fn problem(name: &str) -> ControlProblem {
        builtin(name, &BTreeMap::new()).unwrap()
    }

    fn small(paths: usize) -> MonteCarloOptions {
        MonteCarloOptions {
            paths,
            ..Default::default()
        }
    }

    #[test]
    fn identity_surface_is_linear() {
        let p = problem("identity");
        let sp = SpaceGrid::cube(1, -3.0, 3.0, 13).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let s = value_iteration(&p, &sp, tg, &small(256)).unwrap();
        for j in 0..sp.len() {
            let x = sp.point(j)[0];
            assert_eq!(s.value(4, j), x);
            let err = (s.value(0, j) - x).abs();
            assert!(err <= (3.0 * s.stderr_at(0, j)).max(1e-9), "{x}: {err}");
        }
    }

    #[test]
    fn one_step_equals_best_cost_functional() {
        let p = problem("zcoupled");
        let sp = SpaceGrid::cube(1, -2.0, 2.0, 5).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let opts = small(512);
        let s = value_iteration(&p, &sp, tg, &opts).unwrap();
        for j in 0..sp.len() {
            let x = sp.point(j);
            let ens = node_ensemble(&opts, tg, 1, 0, j).unwrap();
            let (jv, _) = cost_functional(
                &p,
                &ControlProcess::Constant(0),
                0.0,
                &x,
                tg,
                &ens,
                &opts.fbsde,
            )
            .unwrap();
            assert!((s.value(0, j) - jv).abs() < 1e-12);
        }
    }

    #[test]
    fn uncertain_vol_value_and_replay() {
        let p = problem("uncertain_vol");
        let sp = SpaceGrid::cube(1, -6.0, 6.0, 25).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let s = value_iteration(&p, &sp, tg, &small(2048)).unwrap();
        let j0 = sp.flat(&[12]);
        let se = s.stderr_at(0, j0);
        // Linear interpolation of x^2 overshoots by at most h^2 / 4 per step.
        let bias = tg.steps as f64 * sp.h(0).powi(2) / 4.0;
        assert!(
            (s.value(0, j0) - 4.0).abs() <= (3.0 * se).max(0.05) + bias,
            "{} {se}",
            s.value(0, j0)
        );
        assert_eq!(p.controls.point(s.u_star_at(0, j0).unwrap()), &[2.0]);

        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let ens = generate_paths(g, 1, 8192, 3, true).unwrap();
        let (jr, ser) =
            optimal_control_replay(&p, &s, 0.0, &[0.0], &ens, &FbsdeOptions::default()).unwrap();
        assert!((jr - 4.0).abs() <= 3.0 * ser + 0.05, "{jr} {ser}");
    }

    #[test]
    fn residual_of_terminal_only_surface_unfolds_the_definition() {
        let p = problem("monotone_drift");
        let sp = SpaceGrid::cube(1, -3.0, 3.0, 13).unwrap();
        let tg = TimeGrid::new(0.5, 1.0, 1).unwrap();
        // Slice 0 holds a deliberately wrong value; slice 1 holds Phi.
        let mut s =
            ValueSurface::from_fn(sp, tg, 1, SurfaceMeta::new("exact", "t", "0"), |_, x| x[0]);
        s.slice_mut(0).iter_mut().for_each(|v| *v += 0.25);
        let opts = small(1024);
        let (r, se) = dpp_residual(&p, &s, 0.5, &[1.0], 0.5, &opts).unwrap();
        // Phi is linear and the semigroup maps x to x.
        // Up to the Picard stopping tolerance.
        assert!((r - 0.25).abs() <= 1e-5 + 3.0 * se, "{r} {se}");
        assert!(dpp_residual(&p, &s, 0.5, &[1.0], 0.75, &opts).is_err());
    }

    #[test]
    fn step_cap_is_enforced() {
        let p = problem("zcoupled");
        let sp = SpaceGrid::cube(1, -1.0, 1.0, 5).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let opts = MonteCarloOptions {
            delta0: Some(0.25),
            ..small(64)
        };
        assert!(matches!(
            value_iteration(&p, &sp, tg, &opts),
            Err(DppError::StepTooLarge { .. })
        ));
    }
}
