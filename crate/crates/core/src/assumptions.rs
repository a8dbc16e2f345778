//! Randomized audit of the Lipschitz, monotonicity, growth and continuity
//! assumptions, and the small-interval certificate.
//!
//! Every estimate is a supremum over finitely many samples, hence a lower
//! bound for the true constant. Sample `k` is drawn from the substream of its
//! chunk, so the first `n` samples are the same for every `n_samples >= n`
//! and the estimates are monotone in the sample count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprdsl::{Bindings, EvalError};
use crate::fbsde::{
    generate_paths, solve_fbsde, ControlProcess, FbsdeError, FbsdeOptions, TimeGrid,
};
use crate::model::{ControlProblem, Regime};
use crate::rng::{substream, substream_seed};

const CHUNK: usize = 256;

pub const LOWER_BOUND_NOTE: &str =
    "all estimates are sampled suprema and therefore lower bounds for the true constants";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid audit input: {0}")]
    InvalidInput(String),
    #[error("coefficient evaluation failed at {point}: {source}")]
    Eval {
        point: String,
        #[source]
        source: EvalError,
    },
    #[error("algebraic equation not contractive at this gradient bound: q = {q} >= 1")]
    NotContractive { q: f64 },
    #[error("no probe step down to {smallest} contracted; last factor {factor}")]
    ProbeFailed { smallest: f64, factor: f64 },
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
}

/// Sampling box for `(t, x, y, z)`; controls range over the control set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl SampleBox {
    pub fn default_for(problem: &ControlProblem) -> Self {
        Self {
            t: (0.0, problem.horizon),
            x: (-5.0, 5.0),
            y: (-5.0, 5.0),
            z: (-5.0, 5.0),
        }
    }

    fn validate(&self) -> Result<(), AuditError> {
        for (name, (lo, hi)) in [("t", self.t), ("x", self.x), ("y", self.y), ("z", self.z)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AuditError::InvalidInput(format!(
                    "{name} range [{lo}, {hi}] is not a finite interval"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub k_hat: f64,
    pub lsigma_hat: f64,
    /// Worst `<A - Abar, lambda - lambdabar> + beta1|G xhat|^2 + beta2(...)`; `<= 0` passes.
    pub b2_monotone_slack: f64,
    /// Worst `mu1 |G xhat|^2 - (Phi(x) - Phi(xbar)) G xhat`; `<= 0` passes.
    pub b2ii_slack: f64,
    pub growth_c: f64,
    /// Largest change of `G sigma` over `(s, u)` moves of size at most `b7_radius`.
    pub b7_modulus: f64,
    pub b7_radius: f64,
    pub b6_beta2_positive: bool,
    pub sample_count: usize,
    pub seed: u64,
    pub domain_box: SampleBox,
    pub warnings: Vec<String>,
    pub note: String,
}

impl AuditReport {
    pub fn b2_passes(&self) -> bool {
        self.b2_monotone_slack <= 1e-12 && self.b2ii_slack <= 1e-12
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    k: f64,
    lsigma: f64,
    b2: f64,
    b2ii: f64,
    growth: f64,
    b7: f64,
}

impl Stats {
    fn empty() -> Self {
        Self {
            b2: f64::NEG_INFINITY,
            b2ii: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    fn merge(self, o: Self) -> Self {
        Self {
            k: self.k.max(o.k),
            lsigma: self.lsigma.max(o.lsigma),
            b2: self.b2.max(o.b2),
            b2ii: self.b2ii.max(o.b2ii),
            growth: self.growth.max(o.growth),
            b7: self.b7.max(o.b7),
        }
    }
}

#[derive(Debug, Clone)]
struct Sample {
    t: f64,
    x: Vec<f64>,
    y: f64,
    z: Vec<f64>,
    u: usize,
}

/// Coefficient values at one point.
struct Values {
    b: Vec<f64>,
    sigma: Vec<f64>,
    f: f64,
}

struct Auditor<'a> {
    problem: &'a ControlProblem,
    bx: &'a SampleBox,
    radius: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl Auditor<'_> {
    fn draw(&self, rng: &mut impl Rng) -> Sample {
        let p = self.problem;
        Sample {
            t: uniform(rng, self.bx.t),
            x: (0..p.n).map(|_| uniform(rng, self.bx.x)).collect(),
            y: uniform(rng, self.bx.y),
            z: (0..p.d).map(|_| uniform(rng, self.bx.z)).collect(),
            u: rng.random_range(0..p.controls.len()),
        }
    }

    fn eval(&self, s: &Sample) -> Result<Values, AuditError> {
        let p = self.problem;
        let u = p.controls.point(s.u);
        let pt = Bindings {
            t: s.t,
            x: &s.x,
            y: s.y,
            z: &s.z,
            u,
        };
        let wrap = |source| AuditError::Eval {
            point: format!("t={}, x={:?}, y={}, z={:?}, u={:?}", s.t, s.x, s.y, s.z, u),
            source,
        };
        let c = &p.coefficients;
        let mut b = vec![0.0; p.n];
        let mut sigma = vec![0.0; p.n * p.d];
        c.drift(&pt, &mut b).map_err(wrap)?;
        c.diffusion(&pt, &mut sigma).map_err(wrap)?;
        let f = c.driver(&pt).map_err(wrap)?;
        Ok(Values { b, sigma, f })
    }

    fn terminal(&self, x: &[f64]) -> Result<f64, AuditError> {
        self.problem
            .coefficients
            .terminal(x)
            .map_err(|source| AuditError::Eval {
                point: format!("terminal x={x:?}"),
                source,
            })
    }

    /// `G sigma`, a row of length `d`.
    fn g_sigma(&self, sigma: &[f64]) -> Vec<f64> {
        let (n, d) = (self.problem.n, self.problem.d);
        let g = &self.problem.structure.g;
        (0..d)
            .map(|j| (0..n).map(|i| g[i] * sigma[i * d + j]).sum())
            .collect()
    }

    fn chunk(&self, seed: u64, chunk: usize, count: usize) -> Result<Stats, AuditError> {
        let mut rng = substream(seed, "audit", &[chunk as u64]);
        let mut st = Stats::empty();
        for j in 0..count {
            st = st.merge(self.pair(&mut rng, chunk * CHUNK + j)?);
        }
        Ok(st)
    }

    fn pair(&self, rng: &mut impl Rng, k: usize) -> Result<Stats, AuditError> {
        let p = self.problem;
        let s = self.draw(rng);
        // Even samples perturb everything, odd ones a single block.
        let mut o = self.draw(rng);
        o.t = s.t;
        o.u = s.u;
        if k % 2 == 1 {
            match (k / 2) % 3 {
                0 => {
                    o.y = s.y;
                    o.z = s.z.clone();
                }
                1 => {
                    o.x = s.x.clone();
                    o.z = s.z.clone();
                }
                _ => {
                    o.x = s.x.clone();
                    o.y = s.y;
                }
            }
        }
        let (vs, vo) = (self.eval(&s)?, self.eval(&o)?);
        let (ps, po) = (self.terminal(&s.x)?, self.terminal(&o.x)?);
        let st_ = &p.structure;
        let g = &st_.g;
        let dx = diff_norm(&s.x, &o.x);
        let dy = (s.y - o.y).abs();
        let dz = diff_norm(&s.z, &o.z);
        let mut out = Stats::empty();

        let dist = dx + dy + dz;
        if dist > 0.0 {
            let q = diff_norm(&vs.b, &vo.b)
                .max(diff_norm(&vs.sigma, &vo.sigma))
                .max((vs.f - vo.f).abs());
            out.k = q / dist;
        }
        if dx > 0.0 {
            out.k = out.k.max((ps - po).abs() / dx);
        }

        let xhat: Vec<f64> = s.x.iter().zip(&o.x).map(|(a, b)| a - b).collect();
        let yhat = s.y - o.y;
        let zhat: Vec<f64> = s.z.iter().zip(&o.z).map(|(a, b)| a - b).collect();
        let gx: f64 = g.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        let gb = |v: &Values| g.iter().zip(&v.b).map(|(a, b)| a * b).sum::<f64>();
        let (gs, go) = (self.g_sigma(&vs.sigma), self.g_sigma(&vo.sigma));
        let inner = -(vs.f - vo.f) * gx
            + (gb(&vs) - gb(&vo)) * yhat
            + gs.iter()
                .zip(&go)
                .zip(&zhat)
                .map(|((a, b), c)| (a - b) * c)
                .sum::<f64>();
        let g2 = st_.g_norm_sq();
        out.b2 = inner
            + st_.beta1 * gx * gx
            + st_.beta2 * g2 * (yhat * yhat + zhat.iter().map(|v| v * v).sum::<f64>());
        out.b2ii = st_.mu1 * gx * gx - (ps - po) * gx;

        let size = 1.0 + norm(&s.x) + s.y.abs() + norm(&s.z);
        out.growth = (norm(&vs.b) + norm(&vs.sigma) + vs.f.abs() + ps.abs()) / size;

        // z-only pair for the sigma constant.
        let mut zs = s.clone();
        zs.z = (0..p.d).map(|_| uniform(rng, self.bx.z)).collect();
        let dz = diff_norm(&s.z, &zs.z);
        if dz > 0.0 {
            out.lsigma = diff_norm(&vs.sigma, &self.eval(&zs)?.sigma) / dz;
        }

        // (s, u) move within the radius at fixed (x, y, z).
        let mut mv = s.clone();
        let ds = rng.random_range(-1.0..=1.0) * self.radius;
        mv.t = (s.t + ds).clamp(self.bx.t.0, self.bx.t.1);
        let budget = self.radius - (mv.t - s.t).abs();
        let near: Vec<usize> = (0..p.controls.len())
            .filter(|&j| diff_norm(p.controls.point(j), p.controls.point(s.u)) <= budget)
            .collect();
        mv.u = near[rng.random_range(0..near.len())];
        out.b7 = diff_norm(&gs, &self.g_sigma(&self.eval(&mv)?.sigma));
        Ok(out)
    }
}

/// Default `(s, u)` radius for the continuity modulus.
pub const B7_RADIUS: f64 = 0.1;

pub fn audit(
    problem: &ControlProblem,
    bx: &SampleBox,
    n_samples: usize,
    seed: u64,
) -> Result<AuditReport, AuditError> {
    audit_with_radius(problem, bx, n_samples, seed, B7_RADIUS)
}

pub fn audit_with_radius(
    problem: &ControlProblem,
    bx: &SampleBox,
    n_samples: usize,
    seed: u64,
    radius: f64,
) -> Result<AuditReport, AuditError> {
    if n_samples < 2 {
        return Err(AuditError::InvalidInput(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(AuditError::InvalidInput(format!(
            "radius {radius} must be nonnegative"
        )));
    }
    bx.validate()?;
    let a = Auditor {
        problem,
        bx,
        radius,
    };
    let chunks = n_samples.div_ceil(CHUNK);
    let parts: Vec<Stats> = (0..chunks)
        .into_par_iter()
        .map(|c| a.chunk(seed, c, CHUNK.min(n_samples - c * CHUNK)))
        .collect::<Result<_, _>>()?;
    let st = parts.into_iter().fold(Stats::empty(), Stats::merge);

    let s = &problem.structure;
    let mut warnings = Vec::new();
    if st.k > s.k_lip * (1.0 + 1e-9) {
        warnings.push(format!(
            "K_hat = {:.6} exceeds declared K = {}",
            st.k, s.k_lip
        ));
    }
    if st.lsigma > s.l_sigma * (1.0 + 1e-9) + 1e-12 {
        warnings.push(format!(
            "Lsigma_hat = {:.6} exceeds declared L_sigma = {}",
            st.lsigma, s.l_sigma
        ));
    }
    let b2_ok = st.b2 <= 1e-12 && st.b2ii <= 1e-12;
    if !b2_ok {
        let msg = format!(
            "monotonicity violated: slack (i) = {:.3e}, (ii) = {:.3e}",
            st.b2, st.b2ii
        );
        warnings.push(match problem.regime {
            Regime::Monotone => msg,
            Regime::SmallInterval => format!("{msg} (admitted under the small-interval regime)"),
        });
    }
    let sigma_on_z = problem.dependence().sigma_on_z;
    let b6 = s.beta2 > 0.0;
    if sigma_on_z && !b6 {
        warnings.push("sigma depends on z but beta2 = 0".into());
    }
    Ok(AuditReport {
        k_hat: st.k,
        lsigma_hat: st.lsigma,
        b2_monotone_slack: st.b2,
        b2ii_slack: st.b2ii,
        growth_c: st.growth,
        b7_modulus: st.b7,
        b7_radius: radius,
        b6_beta2_positive: b6,
        sample_count: n_samples,
        seed,
        domain_box: bx.clone(),
        warnings,
        note: LOWER_BOUND_NOTE.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub seed: u64,
    pub probes: usize,
    pub steps: usize,
    /// Antithetic pairs per probe.
    pub pairs: usize,
    /// Required per-sweep contraction factor.
    pub factor: f64,
    /// Allowance for Monte Carlo noise in the measured factor.
    pub slack: f64,
    pub halvings: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            probes: 8,
            steps: 4,
            pairs: 512,
            factor: 0.5,
            slack: 0.1,
            halvings: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub delta0: f64,
    /// `p_bound * Lsigma_hat`.
    pub contraction_q: f64,
    /// Worst measured per-sweep Picard factor at `delta0`.
    pub picard_factor: f64,
}

/// Worst factor of the two sweeps after the first, `0` if the problem is
/// uncoupled or converged before.
fn probe_factor(residuals: &[f64]) -> f64 {
    residuals
        .windows(2)
        .skip(1)
        .take(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max)
}

pub fn certify_small_interval(
    problem: &ControlProblem,
    report: &AuditReport,
    p_bound: f64,
    opts: &ProbeOptions,
) -> Result<Certificate, AuditError> {
    if !(p_bound.is_finite() && p_bound >= 0.0) {
        return Err(AuditError::InvalidInput(format!(
            "p_bound {p_bound} must be nonnegative"
        )));
    }
    let q = p_bound * report.lsigma_hat;
    if q >= 1.0 {
        return Err(AuditError::NotContractive { q });
    }
    let t_end = problem.horizon;
    let mut rng = substream(opts.seed, "probe-x", &[]);
    let starts: Vec<Vec<f64>> = (0..opts.probes)
        .map(|_| {
            (0..problem.n)
                .map(|_| uniform(&mut rng, report.domain_box.x))
                .collect()
        })
        .collect();
    let fb = FbsdeOptions {
        tol: 0.0,
        max_sweeps: 4,
        ..Default::default()
    };
    let mut delta = t_end;
    let mut factor = f64::INFINITY;
    for _ in 0..=opts.halvings {
        let grid = TimeGrid::new(t_end - delta, t_end, opts.steps)?;
        factor = 0.0;
        for (j, x) in starts.iter().enumerate() {
            let ens = generate_paths(
                grid,
                problem.d,
                2 * opts.pairs,
                substream_seed(opts.seed, "probe", &[j as u64]),
                true,
            )?;
            let residuals = match solve_fbsde(
                problem,
                &ControlProcess::Constant(0),
                grid.t0,
                x,
                grid,
                &ens,
                &fb,
            ) {
                Ok(s) => s.picard_residuals,
                Err(FbsdeError::NotConverged { residuals }) => residuals,
                Err(e) => return Err(e.into()),
            };
            factor = factor.max(probe_factor(&residuals));
        }
        if factor <= opts.factor + opts.slack {
            return Ok(Certificate {
                delta0: delta,
                contraction_q: q,
                picard_factor: factor,
            });
        }
        delta *= 0.5;
    }
    Err(AuditError::ProbeFailed {
        smallest: delta * 2.0,
        factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, load_problem_str};
    use std::collections::BTreeMap;

    fn problem(name: &str) -> ControlProblem {
        builtin(name, &BTreeMap::new()).unwrap()
    }

    fn run(p: &ControlProblem, n: usize, seed: u64) -> AuditReport {
        audit(p, &SampleBox::default_for(p), n, seed).unwrap()
    }

    #[test]
    fn constant_sigma_has_zero_z_constant() {
        let r = run(&problem("identity"), 4000, 1);
        assert_eq!(r.lsigma_hat, 0.0);
        // Only Phi(x) = x varies.
        assert!((r.k_hat - 1.0).abs() < 1e-12);
        assert_eq!(r.note, LOWER_BOUND_NOTE);
    }

    #[test]
    fn zcoupled_z_constant_is_half() {
        let r = run(&problem("zcoupled"), 4000, 2);
        assert!(
            r.lsigma_hat >= 0.5 - 1e-6 && r.lsigma_hat <= 0.5 + 1e-12,
            "{}",
            r.lsigma_hat
        );
        assert!(r.warnings.iter().any(|w| w.contains("beta2 = 0")));
    }

    #[test]
    fn monotone_drift_satisfies_monotonicity() {
        let r = run(&problem("monotone_drift"), 10_000, 3);
        assert!(r.b2_monotone_slack <= 1e-12, "{}", r.b2_monotone_slack);
        assert!(r.b2ii_slack <= 1e-12, "{}", r.b2ii_slack);
        assert!(r.b2_passes());
    }

    #[test]
    fn uncertain_vol_terminal_constant_near_box_edge() {
        // |x^2 - xbar^2| / |x - xbar| = |x + xbar| approaches 10 on [-5, 5].
        let r = run(&problem("uncertain_vol"), 20_000, 4);
        assert!(r.k_hat > 9.0 && r.k_hat <= 10.0, "{}", r.k_hat);
        // sigma = u moves by at most the radius when u does.
        assert!(r.b7_modulus <= B7_RADIUS + 1e-12);
    }

    #[test]
    fn deterministic_and_prefix_monotone() {
        let p = problem("uncertain_vol");
        let a = run(&p, 1000, 9);
        assert_eq!(a, run(&p, 1000, 9));
        let b = run(&p, 2000, 9);
        assert!(b.k_hat >= a.k_hat && b.lsigma_hat >= a.lsigma_hat && b.growth_c >= a.growth_c);
    }

    #[test]
    fn evaluation_errors_carry_the_point() {
        let cfg = r#"
            [dims]
            n = 1
            d = 1
            horizon = 1.0
            [coefficients]
            b = ["sqrt(x1)"]
            sigma = ["1"]
            f = "0"
            phi = "x1"
            [controls]
            points = [[0.0]]
            [structure]
            G = [1.0]
            K = 1.0
            [regime]
            kind = "small-interval"
        "#;
        let p = load_problem_str(cfg).unwrap();
        let err = audit(&p, &SampleBox::default_for(&p), 100, 0).unwrap_err();
        assert!(matches!(err, AuditError::Eval { ref point, .. } if point.contains("x=")));
        assert!(audit(&p, &SampleBox::default_for(&p), 1, 0).is_err());
    }

    #[test]
    fn certificate_for_zcoupled() {
        let p = problem("zcoupled");
        let r = run(&p, 4000, 5);
        let c = certify_small_interval(&p, &r, 1.0, &ProbeOptions::default()).unwrap();
        assert!((c.contraction_q - 0.5).abs() <= 1e-6);
        assert!(c.delta0 > 0.0 && c.delta0 <= p.horizon);
        assert!(c.picard_factor <= 0.6, "{}", c.picard_factor);
        match certify_small_interval(&p, &r, 2.5, &ProbeOptions::default()) {
            Err(AuditError::NotContractive { q }) => assert!((q - 1.25).abs() <= 1e-5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn certificate_for_uncoupled_problem_is_trivial() {
        let p = problem("identity");
        let r = run(&p, 500, 6);
        let c = certify_small_interval(&p, &r, 7.0, &ProbeOptions::default()).unwrap();
        assert_eq!(c.contraction_q, 0.0);
        assert_eq!(c.delta0, p.horizon);
        assert_eq!(c.picard_factor, 0.0);
    }
}
