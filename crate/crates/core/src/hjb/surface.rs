use serde::{Deserialize, Serialize};

use super::SpaceGrid;
use crate::fbsde::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMeta {
    /// `"hjb-explicit"`, `"dpp"` or `"exact"`.
    pub scheme: String,
    pub problem: String,
    pub problem_hash: String,
    /// Largest CFL factor met during the solve.
    pub cfl_max: Option<f64>,
    pub upwind: Option<bool>,
    pub paths_per_node: Option<usize>,
    pub seed: Option<u64>,
    /// DPP evaluations whose paths left the grid and were extrapolated.
    pub out_of_domain: Option<u64>,
}

impl SurfaceMeta {
    pub fn new(scheme: &str, problem: &str, problem_hash: &str) -> Self {
        Self {
            scheme: scheme.into(),
            problem: problem.into(),
            problem_hash: problem_hash.into(),
            cfl_max: None,
            upwind: None,
            paths_per_node: None,
            seed: None,
            out_of_domain: None,
        }
    }
}

/// Values `W(t_i, x_j)` on a time by space grid, slice-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSurface {
    pub space: SpaceGrid,
    pub time: TimeGrid,
    pub values: Vec<f64>,
    /// Maximizing control index per node.
    pub u_star: Option<Vec<usize>>,
    /// Algebraic solution `V*` at the maximizing control, `d` entries per node.
    pub v_star: Option<Vec<f64>>,
    pub d: usize,
    /// Monte Carlo standard error per node.
    pub stderr: Option<Vec<f64>>,
    pub meta: SurfaceMeta,
}

impl ValueSurface {
    /// Surface with zero values and no optional fields.
    pub fn zeros(space: SpaceGrid, time: TimeGrid, d: usize, meta: SurfaceMeta) -> Self {
        let len = (time.steps + 1) * space.len();
        Self {
            space,
            time,
            values: vec![0.0; len],
            u_star: None,
            v_star: None,
            d,
            stderr: None,
            meta,
        }
    }

    /// Samples `f(t, x)` at every node.
    pub fn from_fn(
        space: SpaceGrid,
        time: TimeGrid,
        d: usize,
        meta: SurfaceMeta,
        f: impl Fn(f64, &[f64]) -> f64,
    ) -> Self {
        let mut s = Self::zeros(space, time, d, meta);
        for i in 0..=time.steps {
            let t = time.node(i);
            for j in 0..s.space.len() {
                let k = s.index(i, j);
                s.values[k] = f(t, &s.space.point(j));
            }
        }
        s
    }

    pub fn steps(&self) -> usize {
        self.time.steps
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.space.len() + j
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.index(i, j)]
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let len = self.space.len();
        &self.values[i * len..(i + 1) * len]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.space.len();
        &mut self.values[i * len..(i + 1) * len]
    }

    pub fn u_star_at(&self, i: usize, j: usize) -> Option<usize> {
        self.u_star.as_ref().map(|u| u[self.index(i, j)])
    }

    pub fn stderr_at(&self, i: usize, j: usize) -> f64 {
        self.stderr.as_ref().map_or(0.0, |s| s[self.index(i, j)])
    }

    pub fn v_star_at(&self, i: usize, j: usize) -> Option<&[f64]> {
        let k = self.index(i, j) * self.d;
        self.v_star.as_ref().map(|v| &v[k..k + self.d])
    }

    /// Multilinear interpolation of `data` (one value per node) at `x`.
    /// Outside the grid the edge cells extrapolate linearly.
    pub fn interp_nodal(space: &SpaceGrid, data: &[f64], x: &[f64]) -> f64 {
        match space.dim() {
            1 => {
                let (k, s) = space.locate(0, x[0]);
                (1.0 - s) * data[k] + s * data[k + 1]
            }
            _ => {
                let (k0, s0) = space.locate(0, x[0]);
                let (k1, s1) = space.locate(1, x[1]);
                let at = |a: usize, b: usize| data[space.flat(&[a, b])];
                (1.0 - s0) * ((1.0 - s1) * at(k0, k1) + s1 * at(k0, k1 + 1))
                    + s0 * ((1.0 - s1) * at(k0 + 1, k1) + s1 * at(k0 + 1, k1 + 1))
            }
        }
    }

    /// Error of [`ValueSurface::interp_nodal`] when `data` holds independent
    /// per-node standard errors: the weights combine in quadrature. Outside
    /// the grid both extrapolation weights, `1 + k` and `-k`, count.
    pub fn interp_nodal_err(space: &SpaceGrid, data: &[f64], x: &[f64]) -> f64 {
        match space.dim() {
            1 => {
                let (k, s) = space.locate(0, x[0]);
                ((1.0 - s).powi(2) * data[k].powi(2) + s.powi(2) * data[k + 1].powi(2)).sqrt()
            }
            _ => {
                let (k0, s0) = space.locate(0, x[0]);
                let (k1, s1) = space.locate(1, x[1]);
                let at = |a: usize, b: usize| data[space.flat(&[a, b])].powi(2);
                let (a0, b0, a1, b1) = (
                    (1.0 - s0).powi(2),
                    s0.powi(2),
                    (1.0 - s1).powi(2),
                    s1.powi(2),
                );
                (a0 * (a1 * at(k0, k1) + b1 * at(k0, k1 + 1))
                    + b0 * (a1 * at(k0 + 1, k1) + b1 * at(k0 + 1, k1 + 1)))
                .sqrt()
            }
        }
    }

    /// Spatial interpolant of slice `i`.
    pub fn interp_slice(&self, i: usize, x: &[f64]) -> f64 {
        Self::interp_nodal(&self.space, self.slice(i), x)
    }

    /// Interpolant in space and, between slices, linear in time.
    pub fn interp(&self, t: f64, x: &[f64]) -> f64 {
        let dt = self.time.dt();
        let r = ((t - self.time.t0) / dt).clamp(0.0, self.steps() as f64);
        let i = (r.floor() as usize).min(self.steps() - 1);
        let s = r - i as f64;
        if s <= 1e-12 {
            return self.interp_slice(i, x);
        }
        if s >= 1.0 - 1e-12 {
            return self.interp_slice(i + 1, x);
        }
        (1.0 - s) * self.interp_slice(i, x) + s * self.interp_slice(i + 1, x)
    }

    /// Nearest node of slice `i` to `x`, clamped to the grid.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = (0..self.space.dim())
            .map(|a| {
                let r = (x[a] - self.space.lo[a]) / self.space.h(a);
                (r.round().max(0.0) as usize).min(self.space.count[a] - 1)
            })
            .collect();
        self.space.flat(&idx)
    }

    /// Largest absolute finite-difference slope of slice `i` along any axis.
    pub fn max_slope(&self, i: usize) -> f64 {
        let sp = &self.space;
        let w = self.slice(i);
        let mut m = 0.0f64;
        for j in 0..sp.len() {
            let idx = sp.multi(j);
            for a in 0..sp.dim() {
                if idx[a] + 1 < sp.count[a] {
                    let mut nb = idx.clone();
                    nb[a] += 1;
                    m = m.max((w[sp.flat(&nb)] - w[j]).abs() / sp.h(a));
                }
            }
        }
        m
    }

    /// `max(1, max |W|)`.
    pub fn scale(&self) -> f64 {
        self.values.iter().fold(1.0f64, |m, v| m.max(v.abs()))
    }
}
