//! Benchmark table: every builtin through the finite-difference solver, the
//! Monte Carlo dynamic programming solver and the viscosity checker, each
//! check reported with its tolerance.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assumptions::{audit, certify_small_interval, AuditError, ProbeOptions, SampleBox};
use crate::dpp::{dpp_residual, value_iteration, DppError, MonteCarloOptions};
use crate::fbsde::{generate_paths, solve_fbsde, ControlProcess, FbsdeError, TimeGrid};
use crate::hjb::{solve_hjb_auto, HjbError, HjbOptions, SpaceGrid, SurfaceMeta, ValueSurface};
use crate::model::{builtin, ControlProblem, ModelError, BUILTIN_NAMES};
use crate::regularity::regularity;
use crate::rng::{substream, substream_seed};
use crate::viscosity::{check_viscosity, TestFamily, TolRule, ViscosityError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Viscosity(#[from] ViscosityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lo: f64,
    pub hi: f64,
    pub hjb_nodes: usize,
    pub dpp_nodes: usize,
    pub dpp_steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Cells next to the boundary excluded from the checks, per grid.
    pub collar: usize,
    pub residual_points: usize,
    pub picard_steps: usize,
    /// Ensemble for the Picard profile; small ensembles inflate the late
    /// per-sweep factors through regression noise.
    pub picard_paths: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            hjb_nodes: 201,
            dpp_nodes: 41,
            dpp_steps: 5,
            paths: 4096,
            seed: 42,
            collar: 2,
            residual_points: 20,
            picard_steps: 10,
            picard_paths: 65536,
        }
    }
}

impl BenchConfig {
    /// Smaller grids and ensembles for smoke runs.
    pub fn quick() -> Self {
        Self {
            hjb_nodes: 101,
            dpp_nodes: 21,
            dpp_steps: 5,
            paths: 1024,
            residual_points: 5,
            ..Self::default()
        }
    }

    /// Interior nodes of `sp` outside the collar.
    pub fn interior(&self, sp: &SpaceGrid) -> Vec<usize> {
        (0..sp.len())
            .filter(|&j| sp.is_interior(j, self.collar))
            .collect()
    }

    /// Half-width of the interior box of `sp`.
    pub fn window(&self, sp: &SpaceGrid) -> f64 {
        (0..sp.dim())
            .map(|a| {
                (self.hi - self.collar as f64 * sp.h(a))
                    .abs()
                    .min((self.lo + self.collar as f64 * sp.h(a)).abs())
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub problem: String,
    pub check: String,
    /// Measured quantity; for per-node checks, the one at the worst node.
    pub value: f64,
    /// Tolerance that `value` is held to.
    pub tolerance: f64,
    /// `value <= tolerance` unless the check says otherwise.
    pub relation: Relation,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
        })
    }
}

impl BenchRow {
    fn new(problem: &str, check: &str, value: f64, relation: Relation, tolerance: f64) -> Self {
        let pass = match relation {
            Relation::AtMost => value <= tolerance,
            Relation::AtLeast => value >= tolerance,
        };
        Self {
            problem: problem.into(),
            check: check.into(),
            value,
            tolerance,
            relation,
            pass,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<20} {:<28} {:>14}    {:>12}  {}\n",
            "problem", "check", "value", "tolerance", "result"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:<28} {:>14.6e} {} {:>12.4e}  {}\n",
                r.problem,
                r.check,
                r.value,
                r.relation,
                r.tolerance,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Largest `|a - b|` relative to its per-node tolerance; returns the
/// difference and tolerance at the worst node.
fn worst_node(items: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    items.fold((0.0, f64::INFINITY), |best, (err, tol)| {
        if err / tol > best.0 / best.1 {
            (err, tol)
        } else {
            best
        }
    })
}

fn per_node_row(problem: &str, check: &str, items: impl Iterator<Item = (f64, f64)>) -> BenchRow {
    let (err, tol) = worst_node(items);
    BenchRow::new(problem, check, err, Relation::AtMost, tol)
}

/// The closed form sampled on a small grid.
pub fn exact_surface(
    problem: &ControlProblem,
    lo: f64,
    hi: f64,
    nodes: usize,
    steps: usize,
) -> Option<ValueSurface> {
    problem.closed_form_value(0.0, &vec![0.0; problem.n])?;
    let sp = SpaceGrid::cube(problem.n, lo, hi, nodes).ok()?;
    let tg = TimeGrid::new(0.0, problem.horizon, steps).ok()?;
    let meta = SurfaceMeta::new("exact", &problem.name, &problem.fingerprint());
    Some(ValueSurface::from_fn(sp, tg, problem.d, meta, |t, x| {
        problem.closed_form_value(t, x).unwrap_or(f64::NAN)
    }))
}

/// Worst per-sweep factor and whether residuals decrease monotonically.
pub fn picard_profile(residuals: &[f64]) -> (f64, bool) {
    let factor = residuals
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .fold(0.0, f64::max);
    let monotone = residuals.windows(2).all(|w| w[1] < w[0]);
    (factor, monotone)
}

/// Runs all checks on one problem.
pub fn bench_problem(
    problem: &ControlProblem,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>, BenchError> {
    let name = problem.name.as_str();
    let mut rows = Vec::new();
    let sp = SpaceGrid::cube(problem.n, cfg.lo, cfg.hi, cfg.hjb_nodes)?;
    let hjb = solve_hjb_auto(problem, &sp, &HjbOptions::default())?;
    let exact = |t: f64, x: &[f64]| problem.closed_form_value(t, x);
    let origin = vec![0.0; problem.n];

    let interior_hjb = cfg.interior(&sp);
    // The convex benchmark is held to its value at the origin only: the
    // zero-curvature boundary condition bends it away from x^2 near the edges.
    let affine = exact(0.0, &origin).is_some() && name != "uncertain_vol";
    if affine {
        rows.push(per_node_row(
            name,
            "hjb closed form",
            interior_hjb.iter().map(|&j| {
                (
                    (hjb.value(0, j) - exact(0.0, &sp.point(j)).unwrap()).abs(),
                    1e-2,
                )
            }),
        ));
    }

    // Dynamic programming, possibly under a certified step cap.
    let mut mc = MonteCarloOptions {
        paths: cfg.paths,
        seed: cfg.seed,
        ..Default::default()
    };
    let coupled = problem.dependence().sigma_on_z;
    let mut certificate = None;
    if coupled {
        let report = audit(problem, &SampleBox::default_for(problem), 4096, cfg.seed)?;
        let p_bound = regularity(&hjb, None, cfg.window(&sp)).lipschitz;
        let probe = ProbeOptions {
            seed: cfg.seed,
            ..Default::default()
        };
        let cert = certify_small_interval(problem, &report, p_bound, &probe)?;
        mc.delta0 = Some(cert.delta0);
        mc.fbsde.delta0 = Some(cert.delta0);
        certificate = Some(cert);
    }
    let dsp = SpaceGrid::cube(problem.n, cfg.lo, cfg.hi, cfg.dpp_nodes)?;
    let tg = TimeGrid::new(0.0, problem.horizon, cfg.dpp_steps)?;
    let dpp = value_iteration(problem, &dsp, tg, &mc)?;
    let interior_dpp = cfg.interior(&dsp);
    if affine {
        rows.push(per_node_row(
            name,
            "dpp closed form",
            interior_dpp.iter().map(|&j| {
                let err = (dpp.value(0, j) - exact(0.0, &dsp.point(j)).unwrap()).abs();
                (err, 1e-2f64.max(3.0 * dpp.stderr_at(0, j)))
            }),
        ));
    }

    if name == "uncertain_vol" {
        let target = exact(0.0, &origin).unwrap_or(f64::NAN);
        let w0 = hjb.interp(0.0, &origin);
        rows.push(BenchRow::new(
            name,
            "hjb W(0,0)",
            (w0 - target).abs(),
            Relation::AtMost,
            0.05,
        ));
        let k = dpp.nearest_node(&origin);
        let se = dpp.stderr_at(0, k);
        rows.push(BenchRow::new(
            name,
            "dpp W(0,0)",
            (dpp.value(0, k) - target).abs(),
            Relation::AtMost,
            0.05f64.max(3.0 * se),
        ));
        rows.push(BenchRow::new(
            name,
            "argmax = u_max where convex",
            argmax_share(problem, &hjb, cfg),
            Relation::AtLeast,
            1.0,
        ));
    }

    // Residual of the dynamic programming principle at random interior points.
    let mut rng = substream(cfg.seed, "bench-residual", &[]);
    let dt = tg.dt();
    let mut residuals = Vec::new();
    for _ in 0..cfg.residual_points {
        let t = rng.random_range(0.0..problem.horizon - dt);
        let x: Vec<f64> = (0..problem.n)
            .map(|a| {
                let pad = cfg.collar as f64 * dsp.h(a);
                rng.random_range(cfg.lo + pad..cfg.hi - pad)
            })
            .collect();
        let (r, se) = dpp_residual(problem, &dpp, t, &x, dt, &mc)?;
        residuals.push((r.abs(), 1e-2f64.max(3.0 * se)));
    }
    rows.push(per_node_row(name, "dpp residual", residuals.into_iter()));

    // Finite differences against Monte Carlo on the coarse nodes.
    let scale = dpp.scale().max(hjb.scale());
    let mut cross = Vec::new();
    for i in 0..=tg.steps {
        for &j in &interior_dpp {
            let w = hjb.interp(tg.node(i), &dsp.point(j));
            cross.push((
                (w - dpp.value(i, j)).abs(),
                (0.05 * scale).max(3.0 * dpp.stderr_at(i, j)),
            ));
        }
    }
    rows.push(per_node_row(name, "hjb vs dpp", cross.into_iter()));

    // Viscosity checks on the exact surface and on a corrupted copy.
    if let Some(mut ex) = exact_surface(problem, -3.0, 3.0, 25, 6) {
        let fam = TestFamily {
            seed: cfg.seed,
            ..Default::default()
        };
        let tol = TolRule::Fixed(1e-6 * ex.scale());
        let r = check_viscosity(problem, &ex, &fam, tol)?;
        rows.push(BenchRow::new(
            name,
            "viscosity exact",
            r.violations() as f64,
            Relation::AtMost,
            0.0,
        ));
        let k = ex.index(3, 12);
        ex.values[k] += 0.5;
        let r = check_viscosity(problem, &ex, &fam, tol)?;
        rows.push(BenchRow::new(
            name,
            "viscosity bump",
            r.violations() as f64,
            Relation::AtLeast,
            1.0,
        ));
    }

    if let Some(cert) = certificate {
        let steps = cfg.picard_steps;
        let delta = cert.delta0.min(problem.horizon);
        let t0 = problem.horizon - delta;
        let grid = TimeGrid::new(t0, problem.horizon, steps)?;
        let seed = substream_seed(cfg.seed, "bench-picard", &[]);
        let ens = generate_paths(grid, problem.d, cfg.picard_paths, seed, true)?;
        let opts = crate::fbsde::FbsdeOptions {
            delta0: Some(cert.delta0),
            ..Default::default()
        };
        let sol = solve_fbsde(
            problem,
            &ControlProcess::Constant(0),
            t0,
            &origin,
            grid,
            &ens,
            &opts,
        )?;
        let (factor, monotone) = picard_profile(&sol.picard_residuals);
        rows.push(BenchRow::new(
            name,
            "picard factor",
            factor,
            Relation::AtMost,
            0.6,
        ));
        rows.push(BenchRow::new(
            name,
            "picard monotone",
            f64::from(u8::from(monotone && sol.converged)),
            Relation::AtLeast,
            1.0,
        ));
    }
    Ok(rows)
}

/// Share of interior nodes with positive discrete `D^2 W` whose recorded
/// maximizer is the control of largest magnitude.
fn argmax_share(problem: &ControlProblem, s: &ValueSurface, cfg: &BenchConfig) -> f64 {
    let Some(u_star) = &s.u_star else { return 0.0 };
    let pts = problem.controls.points();
    let best = (0..pts.len())
        .max_by(|&a, &b| norm(&pts[a]).total_cmp(&norm(&pts[b])))
        .unwrap_or(0);
    let sp = &s.space;
    let (mut hit, mut total) = (0usize, 0usize);
    let interior = cfg.interior(sp);
    for i in 0..s.steps() {
        for &j in &interior {
            let d = crate::hjb::derivatives(sp, s.slice(i), j);
            if d.d2w[0] > 1e-8 {
                total += 1;
                hit += usize::from(pts[u_star[s.index(i, j)]] == pts[best]);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Runs every builtin with default parameters.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let mut rows = Vec::new();
    for name in BUILTIN_NAMES {
        let p = builtin(name, &BTreeMap::new())?;
        log::info!("bench: {name}");
        rows.extend(bench_problem(&p, cfg)?);
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worst_node_is_chosen_by_ratio() {
        let (e, t) = worst_node([(1.0, 10.0), (0.5, 1.0), (2.0, 8.0)].into_iter());
        assert_eq!((e, t), (0.5, 1.0));
        assert_eq!(worst_node(std::iter::empty()), (0.0, f64::INFINITY));
    }

    #[test]
    fn picard_profile_flags_increases() {
        assert_eq!(picard_profile(&[1.0, 0.5, 0.2]), (0.5, true));
        let (f, m) = picard_profile(&[1.0, 0.5, 0.6]);
        assert!(!m && (f - 1.2).abs() < 1e-12);
    }

    #[test]
    fn rows_render_with_tolerances() {
        let r = BenchReport {
            config: BenchConfig::quick(),
            rows: vec![
                BenchRow::new("identity", "dpp residual", 0.003, Relation::AtMost, 0.01),
                BenchRow::new("identity", "viscosity bump", 0.0, Relation::AtLeast, 1.0),
            ],
        };
        assert!(!r.passed());
        let t = r.table();
        assert!(t.contains("pass") && t.contains("FAIL") && t.contains("1.0000e-2"));
    }
}
