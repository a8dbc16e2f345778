//! Numerical check that a value surface is a viscosity sub- and
//! supersolution of the generalized HJB equation.
//!
//! At a node `(t_i, x_j)` a quadratic
//!
//! ```text
//! phi(t, x) = W(t_i, x_j) + a (t - t_i) + p . (x - x_j) + 1/2 (x - x_j)^T c2 (x - x_j)
//! ```
//!
//! touches the slice `W(t_i, .)` from above (sub event: `W - phi` has a local
//! maximum over the `(2r+1)`-stencil) or from below (super event). The time
//! slope `a` is the forward difference of `W` at the node. With `psi` from
//! `psi = Dphi . sigma(t, x, phi, psi, u)` the residual
//! `r = a + H_psi(t, x, phi)` must be `>= -tol` for sub events and `<= tol`
//! for super events.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebraic::{solve_v, AlgebraicError, SigmaMap, DEFAULT_TOL};
use crate::hjb::{hamiltonian, HjbError, ValueSurface};
use crate::model::ControlProblem;
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum ViscosityError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error("algebraic equation failed at t = {t}, x = {x:?}, control {u}: {source}")]
    Algebraic {
        t: f64,
        x: Vec<f64>,
        u: usize,
        #[source]
        source: AlgebraicError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Sub,
    Super,
}

/// How the violation threshold is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TolRule {
    Fixed(f64),
    /// This multiple of the estimated truncation error at the node, with a
    /// floor of `1e-9` times the surface scale.
    Truncation(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFamily {
    /// Attempts per node and kind.
    pub samples: usize,
    /// Bound on the eigenvalues of `c2`.
    pub lambda: f64,
    /// Bound on `|p|`; defaults to `0.95 / L_sigma` when `sigma` depends on
    /// `z`, unbounded otherwise.
    pub p_bound: Option<f64>,
    /// Stencil radius in cells.
    pub radius: usize,
    pub seed: u64,
    /// Cap on checked nodes; nodes are thinned evenly beyond it.
    pub max_nodes: usize,
}

impl Default for TestFamily {
    fn default() -> Self {
        Self {
            samples: 4,
            lambda: 10.0,
            p_bound: None,
            radius: 2,
            seed: 42,
            max_nodes: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchEvent {
    pub kind: EventKind,
    pub step: usize,
    pub node: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub a: f64,
    pub p: Vec<f64>,
    /// Row-major `n x n`.
    pub c2: Vec<f64>,
    pub radius: usize,
    /// `a + H_psi(t, x, phi)`.
    pub pde_value: f64,
    /// `psi` per control.
    pub psi: Vec<Vec<f64>>,
    pub tol: f64,
    pub violation: bool,
}

impl TouchEvent {
    /// Amount by which the residual has the wrong sign, `0` if none.
    pub fn magnitude(&self) -> f64 {
        match self.kind {
            EventKind::Sub => (-self.pde_value).max(0.0),
            EventKind::Super => self.pde_value.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViscosityReport {
    pub sub_violations: usize,
    pub super_violations: usize,
    /// Terminal nodes with `W(T, x) > Phi(x) + tol`.
    pub terminal_sub_violations: usize,
    /// Terminal nodes with `W(T, x) < Phi(x) - tol`.
    pub terminal_super_violations: usize,
    /// Nodes whose stencil leaves the grid.
    pub skipped_boundary: usize,
    /// Samples with no touching quadratic in the family.
    pub discarded: usize,
    pub radius: usize,
    pub p_bound: f64,
    pub lambda: f64,
    pub events: Vec<TouchEvent>,
}

impl ViscosityReport {
    pub fn violations(&self) -> usize {
        self.sub_violations
            + self.super_violations
            + self.terminal_sub_violations
            + self.terminal_super_violations
    }

    /// Largest wrong-sign residual of `kind` among events with `|x| <= window`.
    pub fn worst(&self, kind: EventKind, window: Option<f64>) -> f64 {
        self.events
            .iter()
            .filter(|e| e.kind == kind)
            .filter(|e| window.is_none_or(|w| e.x.iter().all(|v| v.abs() <= w)))
            .map(TouchEvent::magnitude)
            .fold(0.0, f64::max)
    }
}

struct Candidate {
    p: Vec<f64>,
    c2: Vec<f64>,
}

struct Checker<'a> {
    problem: &'a ControlProblem,
    surface: &'a ValueSurface,
    family: &'a TestFamily,
    p_bound: f64,
    g_constraint: bool,
    tol: TolRule,
    scale: f64,
}

/// Offsets of the stencil, excluding the centre.
fn offsets(n: usize, r: isize) -> Vec<Vec<isize>> {
    let mut out = Vec::new();
    let mut idx = vec![-r; n];
    loop {
        if idx.iter().any(|&v| v != 0) {
            out.push(idx.clone());
        }
        let mut a = 0;
        loop {
            if a == n {
                return out;
            }
            idx[a] += 1;
            if idx[a] <= r {
                break;
            }
            idx[a] = -r;
            a += 1;
        }
    }
}

impl Checker<'_> {
    fn n(&self) -> usize {
        self.problem.n
    }

    /// Stencil nodes as (displacement, W difference) at slice `i`.
    fn stencil(&self, i: usize, j: usize) -> Option<Vec<(Vec<f64>, f64)>> {
        let sp = &self.surface.space;
        let r = self.family.radius as isize;
        let base = sp.multi(j);
        if (0..self.n())
            .any(|a| base[a] < self.family.radius || base[a] + self.family.radius >= sp.count[a])
        {
            return None;
        }
        let w0 = self.surface.value(i, j);
        Some(
            offsets(self.n(), r)
                .into_iter()
                .map(|off| {
                    let idx: Vec<usize> = base
                        .iter()
                        .zip(&off)
                        .map(|(&b, &o)| (b as isize + o) as usize)
                        .collect();
                    let disp: Vec<f64> = off
                        .iter()
                        .enumerate()
                        .map(|(a, &o)| o as f64 * sp.h(a))
                        .collect();
                    (disp, self.surface.value(i, sp.flat(&idx)) - w0)
                })
                .collect(),
        )
    }

    fn quad(c: &Candidate, d: &[f64]) -> f64 {
        let n = d.len();
        let mut q = 0.0;
        for a in 0..n {
            q += c.p[a] * d[a];
            for b in 0..n {
                q += 0.5 * d[a] * c.c2[a * n + b] * d[b];
            }
        }
        q
    }

    fn touches(&self, kind: EventKind, c: &Candidate, st: &[(Vec<f64>, f64)]) -> bool {
        let slack = 1e-12 * self.scale;
        st.iter().all(|(d, dw)| {
            let q = Self::quad(c, d);
            match kind {
                EventKind::Sub => *dw <= q + slack,
                EventKind::Super => *dw >= q - slack,
            }
        })
    }

    /// Monotonicity of `phi` along `G` over all stencil pairs.
    fn g_monotone(&self, c: &Candidate, st: &[(Vec<f64>, f64)]) -> bool {
        if !self.g_constraint {
            return true;
        }
        let g = &self.problem.structure.g;
        let mut pts: Vec<&[f64]> = st.iter().map(|(d, _)| d.as_slice()).collect();
        let zero = vec![0.0; self.n()];
        pts.push(&zero);
        for (k, x) in pts.iter().enumerate() {
            for xb in &pts[..k] {
                let dphi = Self::quad(c, x) - Self::quad(c, xb);
                let gx: f64 = g
                    .iter()
                    .zip(x.iter().zip(xb.iter()))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                if dphi * gx < -1e-12 * self.scale {
                    return false;
                }
            }
        }
        true
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Candidates for one node in one dimension: exact feasible `p` interval.
    fn draw_1d(
        &self,
        kind: EventKind,
        st: &[(Vec<f64>, f64)],
        rng: &mut impl Rng,
    ) -> Option<Candidate> {
        let lam = self.family.lambda;
        let c2 = rng.random_range(-lam..=lam);
        let (mut lo, mut hi) = (-self.p_bound, self.p_bound);
        for (d, dw) in st {
            let k = d[0];
            // Sub: dw <= p k + c2 k^2 / 2. Super reverses.
            let bound = (dw - 0.5 * c2 * k * k) / k;
            let upper = (k < 0.0) == (kind == EventKind::Sub);
            if upper {
                hi = hi.min(bound);
            } else {
                lo = lo.max(bound);
            }
        }
        if self.g_constraint {
            let g = self.problem.structure.g[0];
            let m = c2.abs() * self.family.radius as f64 * self.surface.space.h(0);
            if g > 0.0 {
                lo = lo.max(m);
            } else {
                hi = hi.min(-m);
            }
        }
        if !(lo <= hi) {
            return None;
        }
        let p = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        Some(Candidate {
            p: vec![p],
            c2: vec![c2],
        })
    }

    /// Two dimensions: perturb the discrete derivatives, then reject.
    fn draw_2d(&self, kind: EventKind, i: usize, j: usize, rng: &mut impl Rng) -> Candidate {
        let sp = &self.surface.space;
        let dv = crate::hjb::derivatives(sp, self.surface.slice(i), j);
        let lam = self.family.lambda;
        let sign = if kind == EventKind::Sub { 1.0 } else { -1.0 };
        let (s1, s2) = (rng.random_range(0.0..=lam), rng.random_range(0.0..=lam));
        let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (c, s) = (th.cos(), th.sin());
        let e = [
            s1 * c * c + s2 * s * s,
            (s1 - s2) * c * s,
            (s1 - s2) * c * s,
            s1 * s * s + s2 * c * c,
        ];
        let mut c2: Vec<f64> = (0..4)
            .map(|k| (dv.d2w[k] + sign * e[k]).clamp(-lam, lam))
            .collect();
        c2[2] = c2[1];
        let h = sp.min_h();
        let amp = 0.25 * s1.min(s2) * h;
        let p = dv
            .dw
            .iter()
            .map(|g| g + rng.random_range(-1.0..=1.0) * amp)
            .collect();
        Candidate { p, c2 }
    }

    fn tolerance(&self, i: usize, j: usize, drift_rate: f64) -> f64 {
        match self.tol {
            TolRule::Fixed(v) => v,
            TolRule::Truncation(k) => {
                let s = self.surface;
                let dt = s.time.dt();
                let time = if i + 2 <= s.steps() {
                    (s.value(i + 2, j) - 2.0 * s.value(i + 1, j) + s.value(i, j)).abs() / dt
                } else {
                    0.0
                };
                let sp = &s.space;
                let base = sp.multi(j);
                let mut space = 0.0;
                for a in 0..sp.dim() {
                    if base[a] >= 1 && base[a] + 1 < sp.count[a] {
                        let mut up = base.clone();
                        up[a] += 1;
                        let mut dn = base.clone();
                        dn[a] -= 1;
                        let d2 = s.value(i, sp.flat(&up)) - 2.0 * s.value(i, j)
                            + s.value(i, sp.flat(&dn));
                        space += d2.abs() / sp.h(a);
                    }
                }
                (k * (time + drift_rate * space)).max(1e-9 * self.scale)
            }
        }
    }

    fn event(
        &self,
        kind: EventKind,
        i: usize,
        j: usize,
        c: Candidate,
    ) -> Result<TouchEvent, ViscosityError> {
        let s = self.surface;
        let t = s.time.node(i);
        let x = s.space.point(j);
        let w = s.value(i, j);
        let a = (s.value(i + 1, j) - w) / s.time.dt();
        let h = hamiltonian(self.problem, t, &x, w, &c.p, &c.c2, DEFAULT_TOL)?;
        let sigma = SigmaMap::new(self.problem);
        let psi = self
            .problem
            .controls
            .points()
            .iter()
            .enumerate()
            .map(|(k, u)| {
                solve_v(&sigma, &c.p, t, &x, w, u, DEFAULT_TOL)
                    .map(|sol| sol.v)
                    .map_err(|source| ViscosityError::Algebraic {
                        t,
                        x: x.clone(),
                        u: k,
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        let r = a + h.h;
        let tol = self.tolerance(i, j, h.drift_rate);
        let violation = match kind {
            EventKind::Sub => r < -tol,
            EventKind::Super => r > tol,
        };
        Ok(TouchEvent {
            kind,
            step: i,
            node: j,
            t,
            x,
            a,
            p: c.p,
            c2: c.c2,
            radius: self.family.radius,
            pde_value: r,
            psi,
            tol,
            violation,
        })
    }

    /// Events at one node, plus (skipped, discarded) counts.
    fn node(&self, i: usize, j: usize) -> Result<(Vec<TouchEvent>, usize, usize), ViscosityError> {
        let Some(st) = self.stencil(i, j) else {
            return Ok((Vec::new(), 1, 0));
        };
        let mut rng = substream(self.family.seed, "viscosity", &[i as u64, j as u64]);
        let mut events = Vec::new();
        let mut discarded = 0;
        for kind in [EventKind::Sub, EventKind::Super] {
            for _ in 0..self.family.samples {
                let cand = if self.n() == 1 {
                    self.draw_1d(kind, &st, &mut rng)
                } else {
                    Some(self.draw_2d(kind, i, j, &mut rng))
                };
                match cand {
                    Some(c)
                        if Self::norm(&c.p) <= self.p_bound
                            && self.touches(kind, &c, &st)
                            && self.g_monotone(&c, &st) =>
                    {
                        events.push(self.event(kind, i, j, c)?)
                    }
                    _ => discarded += 1,
                }
            }
        }
        Ok((events, 0, discarded))
    }
}

pub fn check_viscosity(
    problem: &ControlProblem,
    surface: &ValueSurface,
    family: &TestFamily,
    tol: TolRule,
) -> Result<ViscosityReport, ViscosityError> {
    if surface.space.dim() != problem.n {
        return Err(ViscosityError::InvalidInput(format!(
            "surface has {} axes, state dimension is {}",
            surface.space.dim(),
            problem.n
        )));
    }
    if family.radius == 0 || family.samples == 0 || !(family.lambda > 0.0) {
        return Err(ViscosityError::InvalidInput(
            "need radius >= 1, samples >= 1 and lambda > 0".into(),
        ));
    }
    let sigma_on_z = problem.dependence().sigma_on_z;
    let l = problem.structure.l_sigma;
    let p_bound = family.p_bound.unwrap_or(if sigma_on_z && l > 0.0 {
        0.95 / l
    } else {
        f64::INFINITY
    });
    let scale = surface.scale();
    let chk = Checker {
        problem,
        surface,
        family,
        p_bound,
        g_constraint: sigma_on_z,
        tol,
        scale,
    };
    let (len, steps) = (surface.space.len(), surface.steps());
    let total = steps * len;
    let stride = total.div_ceil(family.max_nodes.max(1)).max(1);
    let parts: Vec<(Vec<TouchEvent>, usize, usize)> = (0..total)
        .step_by(stride)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|k| chk.node(k / len, k % len))
        .collect::<Result<_, _>>()?;
    let mut events = Vec::new();
    let (mut skipped, mut discarded) = (0, 0);
    for (e, s, d) in parts {
        events.extend(e);
        skipped += s;
        discarded += d;
    }
    events.sort_by(|a, b| (a.step, a.node, a.kind).cmp(&(b.step, b.node, b.kind)));

    let (mut tsub, mut tsup) = (0, 0);
    for j in 0..len {
        let x = surface.space.point(j);
        let phi = problem.coefficients.terminal(&x).map_err(|source| {
            ViscosityError::Hjb(HjbError::Eval {
                t: problem.horizon,
                x: x.clone(),
                source,
            })
        })?;
        let w = surface.value(steps, j);
        let tol_t = match tol {
            TolRule::Fixed(v) => v,
            TolRule::Truncation(_) => 1e-9 * scale,
        };
        if w > phi + tol_t {
            tsub += 1;
        }
        if w < phi - tol_t {
            tsup += 1;
        }
    }
    Ok(ViscosityReport {
        sub_violations: events
            .iter()
            .filter(|e| e.violation && e.kind == EventKind::Sub)
            .count(),
        super_violations: events
            .iter()
            .filter(|e| e.violation && e.kind == EventKind::Super)
            .count(),
        terminal_sub_violations: tsub,
        terminal_super_violations: tsup,
        skipped_boundary: skipped,
        discarded,
        radius: family.radius,
        p_bound,
        lambda: family.lambda,
        events,
    })
}
