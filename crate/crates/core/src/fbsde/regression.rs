//! Local least-squares regression on a point cloud.
//!
//! The cloud is split into cells by nested per-axis quantile bins (axis 0
//! first, then axis 1 within each axis-0 bin, and so on). Each cell carries a
//! constant-plus-linear fit in standardized coordinates. Axes with no spread
//! inside a cell are dropped from that cell's basis, so a cloud of identical
//! points reduces to a plain average.
//!
//! Evaluation blends the fits of neighbouring cells linearly between cell
//! centres, axis by axis along the nesting, and the cell fits are weighted
//! least squares with the same blending weights. The fitted function is then
//! continuous in `x` and in the data, and still exact for affine targets;
//! this keeps the Picard map of the solver free of jumps at cell edges.

use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegressionOptions {
    pub bins_per_axis: usize,
    pub max_cells: usize,
    /// Fewest points per bin along an axis, per basis function.
    pub min_per_basis: usize,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            bins_per_axis: 8,
            max_cells: 64,
            min_per_basis: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Singular;

#[derive(Debug)]
enum Split {
    Leaf(usize),
    Node {
        axis: usize,
        /// Mean coordinate along `axis` of each child's points.
        centers: Vec<f64>,
        children: Vec<Split>,
    },
}

impl Split {
    /// Calls `leaf(cell, weight)` for the cells blended at `x`.
    fn blend(&self, x: &[f64], weight: f64, leaf: &mut impl FnMut(usize, f64)) {
        match self {
            Split::Leaf(c) => leaf(*c, weight),
            Split::Node {
                axis,
                centers,
                children,
            } => {
                let v = x[*axis];
                let k = centers.partition_point(|c| *c <= v);
                if k == 0 {
                    children[0].blend(x, weight, leaf);
                } else if k == centers.len() {
                    children[k - 1].blend(x, weight, leaf);
                } else {
                    let w = (v - centers[k - 1]) / (centers[k] - centers[k - 1]);
                    children[k - 1].blend(x, weight * (1.0 - w), leaf);
                    children[k].blend(x, weight * w, leaf);
                }
            }
        }
    }
}

fn spread_is_degenerate(lo: f64, hi: f64) -> bool {
    hi - lo <= 1e-12 * lo.abs().max(hi.abs()).max(1.0)
}

fn build(
    points: &[f64],
    n: usize,
    members: Vec<usize>,
    axis: usize,
    bins: usize,
    min_per_bin: usize,
    cells: &mut Vec<Vec<usize>>,
) -> Split {
    if axis == n {
        cells.push(members);
        return Split::Leaf(cells.len() - 1);
    }
    let mut vals: Vec<f64> = members.iter().map(|&p| points[p * n + axis]).collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let b = bins.min(members.len() / min_per_bin.max(1)).max(1);
    if b == 1 || spread_is_degenerate(lo, hi) {
        return build(points, n, members, axis + 1, bins, min_per_bin, cells);
    }
    vals.sort_by(f64::total_cmp);
    let mut cuts: Vec<f64> = (1..b).map(|k| vals[k * vals.len() / b]).collect();
    cuts.dedup();
    cuts.retain(|c| *c > lo);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); cuts.len() + 1];
    for &p in &members {
        groups[cuts.partition_point(|c| *c <= points[p * n + axis])].push(p);
    }
    let centers = groups
        .iter()
        .map(|g| g.iter().map(|&p| points[p * n + axis]).sum::<f64>() / g.len() as f64)
        .collect();
    let children = groups
        .into_iter()
        .map(|g| build(points, n, g, axis + 1, bins, min_per_bin, cells))
        .collect();
    Split::Node {
        axis,
        centers,
        children,
    }
}

#[derive(Debug, Clone)]
struct Frame {
    center: Vec<f64>,
    /// Active axes and their inverse standard deviations.
    axes: Vec<(usize, f64)>,
}

impl Frame {
    fn dim(&self) -> usize {
        1 + self.axes.len()
    }

    #[inline]
    fn basis(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        for (k, &(a, s)) in self.axes.iter().enumerate() {
            out[k + 1] = (x[a] - self.center[a]) * s;
        }
    }
}

#[derive(Debug)]
struct CellSystem {
    frame: Frame,
    /// Points with their blending weights for this cell.
    members: Vec<(usize, f64)>,
    /// Lower Cholesky factor of the Gram matrix, row-major `dim x dim`.
    chol: Vec<f64>,
}

/// Cell partition of a cloud plus factored normal equations.
#[derive(Debug)]
pub struct LocalBasis {
    n: usize,
    split: Arc<Split>,
    cells: Vec<CellSystem>,
}

fn cholesky(a: &mut [f64], dim: usize, scale: f64) -> Result<(), Singular> {
    for j in 0..dim {
        let mut s = a[j * dim + j];
        for k in 0..j {
            s -= a[j * dim + k] * a[j * dim + k];
        }
        if s <= 1e-10 * scale {
            return Err(Singular);
        }
        let ljj = s.sqrt();
        a[j * dim + j] = ljj;
        for i in j + 1..dim {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= a[i * dim + k] * a[j * dim + k];
            }
            a[i * dim + j] = s / ljj;
        }
        for k in j + 1..dim {
            a[j * dim + k] = 0.0;
        }
    }
    Ok(())
}

fn chol_solve(l: &[f64], dim: usize, b: &mut [f64]) {
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * dim + k] * b[k];
        }
        b[i] = s / l[i * dim + i];
    }
    for i in (0..dim).rev() {
        let mut s = b[i];
        for k in i + 1..dim {
            s -= l[k * dim + i] * b[k];
        }
        b[i] = s / l[i * dim + i];
    }
}

impl LocalBasis {
    /// `points` holds `len` points of dimension `n`, point-major.
    pub fn new(points: &[f64], n: usize, opts: &RegressionOptions) -> Result<Self, Singular> {
        let len = points.len() / n;
        let per_axis = {
            let mut b = opts.bins_per_axis.max(1);
            while b > 1 && b.pow(n as u32) > opts.max_cells.max(1) {
                b -= 1;
            }
            b
        };
        let mut groups = Vec::new();
        let split = build(
            points,
            n,
            (0..len).collect(),
            0,
            per_axis,
            opts.min_per_basis * (n + 1),
            &mut groups,
        );
        let mut weighted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); groups.len()];
        for p in 0..len {
            split.blend(&points[p * n..(p + 1) * n], 1.0, &mut |c, w| {
                if w > 0.0 {
                    weighted[c].push((p, w));
                }
            });
        }
        let cells = weighted
            .into_iter()
            .map(|members| Self::factor(points, n, members))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            n,
            split: Arc::new(split),
            cells,
        })
    }

    fn factor(
        points: &[f64],
        n: usize,
        members: Vec<(usize, f64)>,
    ) -> Result<CellSystem, Singular> {
        let count: f64 = members.iter().map(|m| m.1).sum();
        let mut center = vec![0.0; n];
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for &(p, w) in &members {
            for a in 0..n {
                let v = points[p * n + a];
                center[a] += w * v;
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        center.iter_mut().for_each(|c| *c /= count);
        let mut axes = Vec::new();
        for a in 0..n {
            if members.len() < 2 || spread_is_degenerate(lo[a], hi[a]) {
                continue;
            }
            let var = members
                .iter()
                .map(|&(p, w)| w * (points[p * n + a] - center[a]).powi(2))
                .sum::<f64>()
                / count;
            axes.push((a, 1.0 / var.sqrt()));
        }
        let frame = Frame { center, axes };
        let dim = frame.dim();
        let mut gram = vec![0.0; dim * dim];
        let mut phi = vec![0.0; dim];
        for &(p, w) in &members {
            frame.basis(&points[p * n..(p + 1) * n], &mut phi);
            for i in 0..dim {
                for j in 0..=i {
                    gram[i * dim + j] += w * phi[i] * phi[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                gram[j * dim + i] = gram[i * dim + j];
            }
        }
        cholesky(&mut gram, dim, count)?;
        Ok(CellSystem {
            frame,
            members,
            chol: gram,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Fit `r` outputs; `targets[p * r + c]` is output `c` at point `p`.
    pub fn fit(&self, points: &[f64], targets: &[f64], r: usize) -> LocalFit {
        let n = self.n;
        let cells = self
            .cells
            .iter()
            .map(|cell| {
                let dim = cell.frame.dim();
                let mut rhs = vec![0.0; dim * r];
                let mut phi = vec![0.0; dim];
                for &(p, w) in &cell.members {
                    cell.frame.basis(&points[p * n..(p + 1) * n], &mut phi);
                    for c in 0..r {
                        let t = w * targets[p * r + c];
                        for k in 0..dim {
                            rhs[c * dim + k] += phi[k] * t;
                        }
                    }
                }
                for c in 0..r {
                    chol_solve(&cell.chol, dim, &mut rhs[c * dim..(c + 1) * dim]);
                }
                CellFit {
                    frame: cell.frame.clone(),
                    coef: rhs,
                }
            })
            .collect();
        LocalFit {
            split: Arc::clone(&self.split),
            cells,
            r,
        }
    }

    /// Per-cell averages only, blended like [`LocalBasis::fit`].
    pub fn fit_means(&self, targets: &[f64], r: usize) -> LocalFit {
        let cells = self
            .cells
            .iter()
            .map(|cell| {
                let mut coef = vec![0.0; r];
                let mut total = 0.0;
                for &(p, w) in &cell.members {
                    total += w;
                    for c in 0..r {
                        coef[c] += w * targets[p * r + c];
                    }
                }
                coef.iter_mut().for_each(|v| *v /= total);
                CellFit {
                    frame: Frame {
                        center: cell.frame.center.clone(),
                        axes: Vec::new(),
                    },
                    coef,
                }
            })
            .collect();
        LocalFit {
            split: Arc::clone(&self.split),
            cells,
            r,
        }
    }
}

#[derive(Debug, Clone)]
struct CellFit {
    frame: Frame,
    /// `coef[c * dim + k]`.
    coef: Vec<f64>,
}

impl CellFit {
    #[inline]
    fn accumulate(&self, x: &[f64], r: usize, weight: f64, out: &mut [f64]) {
        let dim = self.frame.dim();
        let mut phi = [0.0f64; 8];
        let mut heap;
        let phi: &mut [f64] = if dim <= 8 {
            &mut phi[..dim]
        } else {
            heap = vec![0.0; dim];
            &mut heap
        };
        self.frame.basis(x, phi);
        for c in 0..r {
            out[c] += weight
                * (0..dim)
                    .map(|k| self.coef[c * dim + k] * phi[k])
                    .sum::<f64>();
        }
    }
}

/// A fitted function, evaluable anywhere. Beyond the outermost cell centres
/// the outer cells' linear fits extrapolate.
#[derive(Debug, Clone)]
pub struct LocalFit {
    split: Arc<Split>,
    cells: Vec<CellFit>,
    r: usize,
}

impl LocalFit {
    pub fn outputs(&self) -> usize {
        self.r
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[..self.r].iter_mut().for_each(|o| *o = 0.0);
        self.split.blend(x, 1.0, &mut |c, w| {
            self.cells[c].accumulate(x, self.r, w, out)
        });
    }

    pub fn eval1(&self, x: &[f64]) -> f64 {
        let mut o = [0.0];
        self.eval(x, &mut o);
        o[0]
    }
}
