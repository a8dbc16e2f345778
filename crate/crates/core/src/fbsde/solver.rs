use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::regression::{LocalBasis, LocalFit, RegressionOptions};
use super::{ControlProcess, FbsdeError, PathEnsemble, TimeGrid};
use crate::exprdsl::EvalError;
use crate::model::{ControlProblem, Point};

/// Terminal function `Psi(x)` of a backward pass.
pub type Terminal<'a> = dyn Fn(&[f64]) -> Result<f64, EvalError> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbsdeOptions {
    /// Relative tolerance on the sweep-to-sweep change of `(Y, Z)`.
    pub tol: f64,
    pub max_sweeps: usize,
    pub regression: RegressionOptions,
    /// Certified step cap; `None` skips the check.
    pub delta0: Option<f64>,
}

impl Default for FbsdeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 50,
            regression: RegressionOptions::default(),
            delta0: None,
        }
    }
}

/// Discrete `(X, Y, Z)` per node per path, plus Picard diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FbsdeSolution {
    pub grid: TimeGrid,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    pub picard_iterations: usize,
    /// Relative change per sweep; empty when the system is not coupled and
    /// a single sweep is exact.
    pub picard_residuals: Vec<f64>,
    pub converged: bool,
    /// `Y` at the initial node.
    pub j: f64,
    pub stderr: f64,
}

impl FbsdeSolution {
    fn stride(&self) -> usize {
        self.grid.steps + 1
    }

    pub fn x_at(&self, i: usize, p: usize) -> &[f64] {
        let o = (p * self.stride() + i) * self.n;
        &self.x[o..o + self.n]
    }

    pub fn y_at(&self, i: usize, p: usize) -> f64 {
        self.y[p * self.stride() + i]
    }

    pub fn z_at(&self, i: usize, p: usize) -> &[f64] {
        let o = (p * self.stride() + i) * self.d;
        &self.z[o..o + self.d]
    }

    /// Mean of `Z` over paths at node `i`.
    pub fn z_mean(&self, i: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        for p in 0..self.m {
            for (a, v) in acc.iter_mut().zip(self.z_at(i, p)) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / self.m as f64).collect()
    }

    pub fn y_mean(&self, i: usize) -> f64 {
        (0..self.m).map(|p| self.y_at(i, p)).sum::<f64>() / self.m as f64
    }
}

/// `Z(x)` as the ratio of fitted `E[dY dB | x]` to fitted `E[dB^2 | x]`,
/// componentwise. Normalizing by the realized increment variance removes the
/// sampling noise of `dB^2` from the estimate.
#[derive(Debug, Clone)]
struct ZField {
    num: LocalFit,
    den: LocalFit,
}

impl ZField {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let d = out.len();
        let mut den = [0.0f64; 8];
        let mut heap;
        let den: &mut [f64] = if d <= 8 {
            &mut den[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        self.num.eval(x, out);
        self.den.eval(x, den);
        for (o, q) in out.iter_mut().zip(den.iter()) {
            *o /= *q;
        }
    }
}

type Fields = Vec<Option<(LocalFit, ZField)>>;

const PAR_MIN: usize = 256;

/// Solve on `grid = [t, T]` with terminal `Phi`.
#[allow(clippy::too_many_arguments)]
pub fn solve_fbsde(
    problem: &ControlProblem,
    control: &ControlProcess,
    t: f64,
    x: &[f64],
    grid: TimeGrid,
    ensemble: &PathEnsemble,
    opts: &FbsdeOptions,
) -> Result<FbsdeSolution, FbsdeError> {
    check_start(t, grid)?;
    if !close(grid.t1, problem.horizon) {
        return Err(FbsdeError::InvalidInput(format!(
            "grid ends at {}, horizon is {}",
            grid.t1, problem.horizon
        )));
    }
    let phi = |x: &[f64]| problem.coefficients.terminal(x);
    solve_core(problem, control, x, grid, ensemble, &phi, opts)
}

/// `J(t, x; u)` and its Monte Carlo standard error.
#[allow(clippy::too_many_arguments)]
pub fn cost_functional(
    problem: &ControlProblem,
    control: &ControlProcess,
    t: f64,
    x: &[f64],
    grid: TimeGrid,
    ensemble: &PathEnsemble,
    opts: &FbsdeOptions,
) -> Result<(f64, f64), FbsdeError> {
    let s = solve_fbsde(problem, control, t, x, grid, ensemble, opts)?;
    Ok((s.j, s.stderr))
}

/// Full solution of the system on `[t, t + delta]` with terminal `psi`.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_solution(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    delta: f64,
    control: &ControlProcess,
    psi: &Terminal<'_>,
    grid: TimeGrid,
    ensemble: &PathEnsemble,
    opts: &FbsdeOptions,
) -> Result<FbsdeSolution, FbsdeError> {
    check_start(t, grid)?;
    if !(delta > 0.0) || !close(grid.t1, t + delta) {
        return Err(FbsdeError::InvalidInput(format!(
            "grid [{}, {}] does not span [t, t + delta] = [{t}, {}]",
            grid.t0,
            grid.t1,
            t + delta
        )));
    }
    if grid.t1 > problem.horizon && !close(grid.t1, problem.horizon) {
        return Err(FbsdeError::InvalidInput(format!(
            "t + delta = {} exceeds the horizon {}",
            grid.t1, problem.horizon
        )));
    }
    solve_core(problem, control, x, grid, ensemble, psi, opts)
}

/// The backward semigroup applied to `psi`: the initial `Y` of the system
/// on `[t, t + delta]` with terminal condition `psi(X_{t + delta})`.
#[allow(clippy::too_many_arguments)]
pub fn backward_semigroup(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    delta: f64,
    control: &ControlProcess,
    psi: &Terminal<'_>,
    grid: TimeGrid,
    ensemble: &PathEnsemble,
    opts: &FbsdeOptions,
) -> Result<f64, FbsdeError> {
    semigroup_solution(problem, t, x, delta, control, psi, grid, ensemble, opts).map(|s| s.j)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn check_start(t: f64, grid: TimeGrid) -> Result<(), FbsdeError> {
    if close(grid.t0, t) {
        Ok(())
    } else {
        Err(FbsdeError::InvalidInput(format!(
            "grid starts at {}, initial time is {t}",
            grid.t0
        )))
    }
}

fn solve_core(
    problem: &ControlProblem,
    control: &ControlProcess,
    x0: &[f64],
    grid: TimeGrid,
    ens: &PathEnsemble,
    terminal: &Terminal<'_>,
    opts: &FbsdeOptions,
) -> Result<FbsdeSolution, FbsdeError> {
    let (n, d, m, steps) = (problem.n, problem.d, ens.m, grid.steps);
    if x0.len() != n {
        return Err(FbsdeError::InvalidInput(format!(
            "initial state has {} entries, n = {n}",
            x0.len()
        )));
    }
    if ens.d != d || ens.grid.steps != steps || !close(ens.grid.dt(), grid.dt()) {
        return Err(FbsdeError::InvalidInput(
            "ensemble does not match the time grid or Brownian dimension".into(),
        ));
    }
    control.validate(problem.controls.len(), steps)?;
    let coupled = problem.dependence().forward_coupled();
    if let (true, Some(delta0)) = (coupled, opts.delta0) {
        if grid.dt() > delta0 * (1.0 + 1e-12) {
            return Err(FbsdeError::StepTooLarge {
                dt: grid.dt(),
                delta0,
            });
        }
    }

    let ctx = Ctx {
        problem,
        control,
        grid,
        ens,
        n,
        d,
        m,
        steps,
    };
    let mut fields: Fields = vec![None; steps];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut residuals = Vec::new();
    let sweeps = if coupled { opts.max_sweeps.max(1) } else { 1 };
    for sweep in 1..=sweeps {
        let (xs, us) = ctx.forward(x0, &fields)?;
        if xs.iter().any(|v| !v.is_finite()) {
            residuals.push(f64::INFINITY);
            return Err(FbsdeError::NotConverged { residuals });
        }
        let back = match ctx.backward(&xs, &us, terminal, &opts.regression) {
            // After the first sweep a collapsed cloud means the iterates blew up.
            Err(FbsdeError::RegressionSingular { .. }) if sweep > 1 => {
                residuals.push(f64::INFINITY);
                return Err(FbsdeError::NotConverged { residuals });
            }
            other => other?,
        };
        let done = |converged: bool, residuals: Vec<f64>, back: Backward| FbsdeSolution {
            grid,
            n,
            d,
            m,
            x: xs,
            y: back.y,
            z: back.z,
            picard_iterations: sweep,
            picard_residuals: residuals,
            converged,
            j: back.j,
            stderr: back.stderr,
        };
        if !coupled {
            return Ok(done(true, residuals, back));
        }
        let r = ctx.residual(prev.as_ref(), &back.y, &back.z);
        residuals.push(r);
        log::trace!("picard sweep {sweep}: residual {r:e}");
        if !r.is_finite() {
            return Err(FbsdeError::NotConverged { residuals });
        }
        if r <= opts.tol {
            return Ok(done(true, residuals, back));
        }
        fields = back.fields;
        prev = Some((back.y, back.z));
    }
    Err(FbsdeError::NotConverged { residuals })
}

struct Ctx<'a> {
    problem: &'a ControlProblem,
    control: &'a ControlProcess,
    grid: TimeGrid,
    ens: &'a PathEnsemble,
    n: usize,
    d: usize,
    m: usize,
    steps: usize,
}

struct Backward {
    y: Vec<f64>,
    z: Vec<f64>,
    fields: Fields,
    j: f64,
    stderr: f64,
}

impl Ctx<'_> {
    fn eval_err<'x>(&self, t: f64, x: &'x [f64]) -> impl FnOnce(EvalError) -> FbsdeError + 'x {
        move |source| FbsdeError::Eval {
            t,
            x: x.to_vec(),
            source,
        }
    }

    /// Euler-Maruyama with `(Y, Z)` read from the previous sweep's fitted
    /// decoupling fields. Returns states (path-major) and control indices.
    fn forward(&self, x0: &[f64], fields: &Fields) -> Result<(Vec<f64>, Vec<u32>), FbsdeError> {
        let (n, d, steps) = (self.n, self.d, self.steps);
        let stride = steps + 1;
        let dt = self.grid.dt();
        let controls = &self.problem.controls;
        let coeffs = self.problem.coefficients.as_ref();
        let mut xs = vec![0.0; self.m * stride * n];
        let mut us = vec![0u32; self.m * steps];
        xs.par_chunks_mut(stride * n)
            .zip(us.par_chunks_mut(steps))
            .enumerate()
            .with_min_len(PAR_MIN)
            .try_for_each_init(
                || (vec![0.0; n], vec![0.0; n * d], vec![0.0; d]),
                |(b, s, z), (p, (xp, up))| -> Result<(), FbsdeError> {
                    xp[..n].copy_from_slice(x0);
                    for i in 0..steps {
                        let t = self.grid.node(i);
                        let (head, tail) = xp.split_at_mut((i + 1) * n);
                        let xi = &head[i * n..];
                        let y = match &fields[i] {
                            Some((fy, fz)) => {
                                fz.eval(xi, z);
                                fy.eval1(xi)
                            }
                            None => {
                                z.iter_mut().for_each(|v| *v = 0.0);
                                0.0
                            }
                        };
                        let ui = self.control.index(i, t, xi);
                        if ui >= controls.len() {
                            return Err(FbsdeError::ControlOutOfRange {
                                index: ui,
                                len: controls.len(),
                            });
                        }
                        up[i] = ui as u32;
                        let pt = Point {
                            t,
                            x: xi,
                            y,
                            z,
                            u: controls.point(ui),
                        };
                        coeffs.drift(&pt, b).map_err(self.eval_err(t, xi))?;
                        coeffs.diffusion(&pt, s).map_err(self.eval_err(t, xi))?;
                        let db = self.ens.increment(i, p);
                        for k in 0..n {
                            let mut v = xi[k] + b[k] * dt;
                            for j in 0..d {
                                v += s[k * d + j] * db[j];
                            }
                            tail[k] = v;
                        }
                    }
                    Ok(())
                },
            )?;
        Ok((xs, us))
    }

    fn backward(
        &self,
        xs: &[f64],
        us: &[u32],
        terminal: &Terminal<'_>,
        reg: &RegressionOptions,
    ) -> Result<Backward, FbsdeError> {
        let (n, d, m, steps) = (self.n, self.d, self.m, self.steps);
        let stride = steps + 1;
        let dt = self.grid.dt();
        let coeffs = self.problem.coefficients.as_ref();
        let controls = &self.problem.controls;
        let xat = |i: usize, p: usize| &xs[(p * stride + i) * n..(p * stride + i + 1) * n];

        let mut y = vec![0.0; m * stride];
        let mut z = vec![0.0; m * stride * d];
        let t_end = self.grid.node(steps);
        let y_next: Vec<f64> = (0..m)
            .into_par_iter()
            .with_min_len(PAR_MIN)
            .map(|p| terminal(xat(steps, p)).map_err(self.eval_err(t_end, xat(steps, p))))
            .collect::<Result<_, _>>()?;
        for p in 0..m {
            y[p * stride + steps] = y_next[p];
        }
        let mut y_next = y_next;
        let mut target = y_next.clone();
        let mut fields: Fields = vec![None; steps];
        let mut cloud = vec![0.0; m * n];

        for i in (0..steps).rev() {
            let t = self.grid.node(i);
            for p in 0..m {
                cloud[p * n..(p + 1) * n].copy_from_slice(xat(i, p));
            }
            let basis = LocalBasis::new(&cloud, n, reg)
                .map_err(|_| FbsdeError::RegressionSingular { node: i })?;

            let pairs: Vec<f64> = (0..m).flat_map(|p| [target[p], y_next[p]]).collect();
            let efit = basis.fit(&cloud, &pairs, 2);
            let e: Vec<[f64; 2]> = (0..m)
                .map(|p| {
                    let mut o = [0.0; 2];
                    efit.eval(xat(i, p), &mut o);
                    o
                })
                .collect();

            let mut num = vec![0.0; m * d];
            let mut den = vec![0.0; m * d];
            for p in 0..m {
                let db = self.ens.increment(i, p);
                let innov = y_next[p] - e[p][1];
                for j in 0..d {
                    num[p * d + j] = innov * db[j] / dt;
                    den[p * d + j] = db[j] * db[j] / dt;
                }
            }
            let zfit = ZField {
                num: basis.fit(&cloud, &num, d),
                den: basis.fit_means(&den, d),
            };

            let mut zs = vec![0.0; m * d];
            let rows: Vec<(f64, f64)> = zs
                .par_chunks_mut(d)
                .enumerate()
                .with_min_len(PAR_MIN)
                .map(|(p, zi)| {
                    let xi = xat(i, p);
                    zfit.eval(xi, zi);
                    let u = controls.point(us[p * steps + i] as usize);
                    let ev = e[p][0];
                    let pt = |y| Point {
                        t,
                        x: xi,
                        y,
                        z: &*zi,
                        u,
                    };
                    let f0 = coeffs.driver(&pt(ev)).map_err(self.eval_err(t, xi))?;
                    let f1 = coeffs
                        .driver(&pt(ev + f0 * dt))
                        .map_err(self.eval_err(t, xi))?;
                    Ok((ev + f1 * dt, f1 * dt))
                })
                .collect::<Result<_, FbsdeError>>()?;

            let mut yi = vec![0.0; m];
            for (p, (yv, fdt)) in rows.into_iter().enumerate() {
                yi[p] = yv;
                target[p] += fdt;
                y[p * stride + i] = yv;
                z[(p * stride + i) * d..(p * stride + i + 1) * d]
                    .copy_from_slice(&zs[p * d..(p + 1) * d]);
            }
            let yfit = basis.fit(&cloud, &yi, 1);
            fields[i] = Some((yfit, zfit));
            y_next = yi;
        }

        if let Some((_, zfit)) = &fields[steps - 1] {
            for p in 0..m {
                let o = (p * stride + steps) * d;
                zfit.eval(xat(steps, p), &mut z[o..o + d]);
            }
        }

        let j = (0..m).map(|p| y[p * stride]).sum::<f64>() / m as f64;
        let samples: Vec<f64> = if self.ens.antithetic {
            target.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect()
        } else {
            target
        };
        let k = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / k;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
        Ok(Backward {
            y,
            z,
            fields,
            j,
            stderr: (var / k).sqrt(),
        })
    }

    fn residual(&self, prev: Option<&(Vec<f64>, Vec<f64>)>, y: &[f64], z: &[f64]) -> f64 {
        let (d, m) = (self.d, self.m);
        let stride = self.steps + 1;
        let mut worst_diff = 0.0f64;
        let mut worst_norm = 0.0f64;
        for i in 0..stride {
            let mut diff = 0.0;
            let mut norm = 0.0;
            for p in 0..m {
                let k = p * stride + i;
                let (py, pz) = match prev {
                    Some((py, pz)) => (py[k], &pz[k * d..(k + 1) * d]),
                    None => (0.0, &[][..]),
                };
                diff += (y[k] - py).powi(2);
                norm += y[k].powi(2);
                for j in 0..d {
                    let zv = z[k * d + j];
                    diff += (zv - pz.get(j).copied().unwrap_or(0.0)).powi(2);
                    norm += zv * zv;
                }
            }
            worst_diff = worst_diff.max(diff / m as f64);
            worst_norm = worst_norm.max(norm / m as f64);
        }
        worst_diff.sqrt() / worst_norm.sqrt().max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::generate_paths;
    use crate::model::{builtin, load_problem_str};
    use std::collections::BTreeMap;

    fn eps(e: f64) -> BTreeMap<String, f64> {
        [("epsilon".to_string(), e)].into_iter().collect()
    }

    #[test]
    fn identity_recovers_initial_state() {
        let p = builtin("identity", &BTreeMap::new()).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let e = generate_paths(g, 1, 4000, 5, false).unwrap();
        let s = solve_fbsde(
            &p,
            &ControlProcess::Constant(0),
            0.0,
            &[3.0],
            g,
            &e,
            &Default::default(),
        )
        .unwrap();
        assert!(s.converged && s.picard_residuals.is_empty());
        assert!(
            (s.j - 3.0).abs() <= 3.0 * s.stderr,
            "{} +- {}",
            s.j,
            s.stderr
        );
        for p in 0..4000 {
            assert_eq!(s.y_at(10, p), s.x_at(10, p)[0]);
        }
    }

    #[test]
    fn zcoupled_z_and_y() {
        let p = builtin("zcoupled", &eps(0.5)).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let e = generate_paths(g, 1, 16384, 11, true).unwrap();
        let s = solve_fbsde(
            &p,
            &ControlProcess::Constant(0),
            0.0,
            &[1.0],
            g,
            &e,
            &Default::default(),
        )
        .unwrap();
        assert!(s.converged);
        assert!((s.j - 1.0).abs() <= 1e-9, "{}", s.j);
        for i in 1..8 {
            let zm = s.z_mean(i)[0];
            assert!((zm - 2.0).abs() <= 0.05, "node {i}: {zm}");
        }
    }

    #[test]
    fn constant_driver_integrates_exactly() {
        let cfg = r#"
            [dims]
            n = 1
            d = 1
            horizon = 1.0
            [coefficients]
            b = ["0"]
            sigma = ["1"]
            f = "1"
            phi = "0"
            [controls]
            points = [[0.0]]
            [structure]
            G = [1.0]
            K = 1.0
            [regime]
            kind = "small-interval"
        "#;
        let p = load_problem_str(cfg).unwrap();
        let g = TimeGrid::new(0.25, 1.0, 6).unwrap();
        let e = generate_paths(g, 1, 64, 2, false).unwrap();
        let (j, se) = cost_functional(
            &p,
            &ControlProcess::Constant(0),
            0.25,
            &[0.4],
            g,
            &e,
            &Default::default(),
        )
        .unwrap();
        assert!((j - 0.75).abs() < 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn monotone_drift_and_uncertain_vol_costs() {
        let p = builtin("monotone_drift", &BTreeMap::new()).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let e = generate_paths(g, 1, 8192, 3, true).unwrap();
        let s = solve_fbsde(
            &p,
            &ControlProcess::Constant(0),
            0.0,
            &[2.0],
            g,
            &e,
            &Default::default(),
        )
        .unwrap();
        assert!(s.converged, "{:?}", s.picard_residuals);
        assert!(
            (s.j - 2.0).abs() <= 3.0 * s.stderr.max(1e-3),
            "{} +- {}",
            s.j,
            s.stderr
        );

        let p = builtin("uncertain_vol", &BTreeMap::new()).unwrap();
        let e = generate_paths(g, 1, 8192, 4, false).unwrap();
        let top = p.controls.len() - 1;
        let (j, se) = cost_functional(
            &p,
            &ControlProcess::Constant(top),
            0.0,
            &[0.0],
            g,
            &e,
            &Default::default(),
        )
        .unwrap();
        assert!((j - 4.0).abs() <= 3.0 * se, "{j} +- {se}");
    }

    #[test]
    fn semigroup_special_cases() {
        let p = builtin("uncertain_vol", &BTreeMap::new()).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let e = generate_paths(g, 1, 512, 8, true).unwrap();
        let ctl = ControlProcess::Constant(3);
        let opts = FbsdeOptions::default();
        let phi = |x: &[f64]| p.coefficients.terminal(x);
        let a = backward_semigroup(&p, 0.0, &[0.5], 1.0, &ctl, &phi, g, &e, &opts).unwrap();
        let (b, _) = cost_functional(&p, &ctl, 0.0, &[0.5], g, &e, &opts).unwrap();
        assert_eq!(a, b);
        let c = |_: &[f64]| Ok(2.5);
        let g2 = TimeGrid::new(0.2, 0.6, 2).unwrap();
        let e2 = generate_paths(g2, 1, 64, 8, false).unwrap();
        assert_eq!(
            backward_semigroup(&p, 0.2, &[0.5], 0.4, &ctl, &c, g2, &e2, &opts).unwrap(),
            2.5
        );
    }

    #[test]
    fn step_cap_and_divergence_are_reported() {
        let p = builtin("zcoupled", &eps(0.5)).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let e = generate_paths(g, 1, 64, 1, true).unwrap();
        let opts = FbsdeOptions {
            delta0: Some(0.25),
            ..Default::default()
        };
        let err =
            solve_fbsde(&p, &ControlProcess::Constant(0), 0.0, &[0.0], g, &e, &opts).unwrap_err();
        assert!(matches!(err, FbsdeError::StepTooLarge { .. }));
        let opts = FbsdeOptions {
            max_sweeps: 3,
            ..Default::default()
        };
        let err =
            solve_fbsde(&p, &ControlProcess::Constant(0), 0.0, &[0.0], g, &e, &opts).unwrap_err();
        assert!(matches!(err, FbsdeError::NotConverged { ref residuals } if residuals.len() == 3));
    }
}
