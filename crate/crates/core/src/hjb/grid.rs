use serde::{Deserialize, Serialize};

use super::HjbError;

/// Uniform tensor grid in one or two space dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub count: Vec<usize>,
}

pub const MIN_NODES: usize = 5;

impl SpaceGrid {
    pub fn new(lo: &[f64], hi: &[f64], count: &[usize]) -> Result<Self, HjbError> {
        let n = lo.len();
        if n == 0 || n > 2 || hi.len() != n || count.len() != n {
            return Err(HjbError::InvalidGrid(format!(
                "need matching lo/hi/count in 1 or 2 dimensions, got {}/{}/{}",
                lo.len(),
                hi.len(),
                count.len()
            )));
        }
        for a in 0..n {
            if !(lo[a].is_finite() && hi[a].is_finite() && lo[a] < hi[a]) {
                return Err(HjbError::InvalidGrid(format!(
                    "axis {a}: need lo < hi, got [{}, {}]",
                    lo[a], hi[a]
                )));
            }
            if count[a] < MIN_NODES {
                return Err(HjbError::InvalidGrid(format!(
                    "axis {a}: {} nodes, need at least {MIN_NODES}",
                    count[a]
                )));
            }
        }
        Ok(Self {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            count: count.to_vec(),
        })
    }

    /// Same box and node count on every axis.
    pub fn cube(n: usize, lo: f64, hi: f64, count: usize) -> Result<Self, HjbError> {
        Self::new(&vec![lo; n], &vec![hi; n], &vec![count; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.count.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.count[axis] - 1) as f64
    }

    pub fn min_h(&self) -> f64 {
        (0..self.dim())
            .map(|a| self.h(a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn coord(&self, axis: usize, j: usize) -> f64 {
        if j + 1 == self.count[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + j as f64 * self.h(axis)
        }
    }

    /// Flat index, last axis fastest.
    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.count)
            .fold(0, |acc, (i, c)| acc * c + i)
    }

    pub fn multi(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.count[a];
            flat /= self.count[a];
        }
        idx
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi(flat)
            .iter()
            .enumerate()
            .map(|(a, &j)| self.coord(a, j))
            .collect()
    }

    /// Nodes at least `collar` cells away from every edge.
    pub fn is_interior(&self, flat: usize, collar: usize) -> bool {
        self.multi(flat)
            .iter()
            .zip(&self.count)
            .all(|(&j, &c)| j >= collar && j + collar < c)
    }

    /// Cell `k` and local coordinate `s` with `x = coord(k) + s h`; `s` leaves
    /// `[0, 1]` outside the grid, which extrapolates the edge cell.
    pub fn locate(&self, axis: usize, x: f64) -> (usize, f64) {
        let h = self.h(axis);
        let r = (x - self.lo[axis]) / h;
        let k = (r.floor().max(0.0) as usize).min(self.count[axis] - 2);
        (k, r - k as f64)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(a, &v)| v >= self.lo[a] && v <= self.hi[a])
    }
}
