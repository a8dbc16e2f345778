//! Fitted regularity constants of a value surface: spatial Lipschitz slope,
//! linear growth, modulus of continuity in time and monotonicity along `G`.

use serde::{Deserialize, Serialize};

use crate::hjb::ValueSurface;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    /// Only nodes with `|x_a| <= window` on every axis enter the fits.
    pub window: f64,
    /// Largest finite-difference slope over all slices.
    pub lipschitz: f64,
    /// Slope of the terminal slice.
    pub terminal_slope: f64,
    /// Smallest `c` with `slope(t_i) <= terminal_slope + c (T - t_i)`.
    pub lipschitz_drift: f64,
    /// `max |W| / (1 + |x|)`.
    pub growth: f64,
    /// `max |W(t_k, x) - W(t_l, x)| / sqrt(|t_k - t_l|)`.
    pub time_modulus: f64,
    /// Smallest `(W(t, x) - W(t, xbar)) G (x - xbar)` over grid pairs along
    /// `G`, when requested.
    pub g_monotone_min: Option<f64>,
}

const MAX_SLICES: usize = 65;

fn in_window(x: &[f64], window: f64) -> bool {
    x.iter().all(|v| v.abs() <= window)
}

fn slice_slope(s: &ValueSurface, i: usize, window: f64) -> f64 {
    let sp = &s.space;
    let mut m = 0.0f64;
    for j in 0..sp.len() {
        if !in_window(&sp.point(j), window) {
            continue;
        }
        let idx = sp.multi(j);
        for a in 0..sp.dim() {
            if idx[a] + 1 < sp.count[a] {
                let mut nb = idx.clone();
                nb[a] += 1;
                let k = sp.flat(&nb);
                if in_window(&sp.point(k), window) {
                    m = m.max((s.value(i, k) - s.value(i, j)).abs() / sp.h(a));
                }
            }
        }
    }
    m
}

/// Smallest integer offset parallel to `g` with entries in `[-3, 3]`.
fn g_offset(g: &[f64], h: &[f64]) -> Option<Vec<isize>> {
    let mut best: Option<(f64, Vec<isize>)> = None;
    let range = -3isize..=3;
    let cands: Vec<Vec<isize>> = match g.len() {
        1 => range.map(|a| vec![a]).collect(),
        _ => range
            .clone()
            .flat_map(|a| range.clone().map(move |b| vec![a, b]))
            .collect(),
    };
    for c in cands {
        let d: Vec<f64> = c.iter().zip(h).map(|(&k, h)| k as f64 * h).collect();
        let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn == 0.0 {
            continue;
        }
        let cos = d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (dn * gn);
        if (cos - 1.0).abs() < 1e-12 && best.as_ref().is_none_or(|(l, _)| dn < *l) {
            best = Some((dn, c));
        }
    }
    best.map(|b| b.1)
}

fn g_monotone(s: &ValueSurface, g: &[f64], window: f64) -> Option<f64> {
    let sp = &s.space;
    let h: Vec<f64> = (0..sp.dim()).map(|a| sp.h(a)).collect();
    let off = g_offset(g, &h)?;
    let mut worst = f64::INFINITY;
    for j in 0..sp.len() {
        let idx = sp.multi(j);
        let nb: Option<Vec<usize>> = idx
            .iter()
            .zip(&off)
            .zip(&sp.count)
            .map(|((&i, &o), &c)| {
                let v = i as isize + o;
                (v >= 0 && v < c as isize).then_some(v as usize)
            })
            .collect();
        let Some(nb) = nb else { continue };
        let k = sp.flat(&nb);
        let (x, xb) = (sp.point(k), sp.point(j));
        if !(in_window(&x, window) && in_window(&xb, window)) {
            continue;
        }
        let gx: f64 = g
            .iter()
            .zip(x.iter().zip(&xb))
            .map(|(g, (a, b))| g * (a - b))
            .sum();
        for i in 0..=s.steps() {
            worst = worst.min((s.value(i, k) - s.value(i, j)) * gx);
        }
    }
    worst.is_finite().then_some(worst)
}

/// Fits the constants on `surface`; `g` enables the monotonicity check.
pub fn regularity(surface: &ValueSurface, g: Option<&[f64]>, window: f64) -> RegularityReport {
    let s = surface;
    let steps = s.steps();
    let t_end = s.time.t1;
    let slopes: Vec<f64> = (0..=steps).map(|i| slice_slope(s, i, window)).collect();
    let terminal = slopes[steps];
    let drift = (0..steps)
        .map(|i| (slopes[i] - terminal).max(0.0) / (t_end - s.time.node(i)))
        .fold(0.0, f64::max);

    let sp = &s.space;
    let nodes: Vec<usize> = (0..sp.len())
        .filter(|&j| in_window(&sp.point(j), window))
        .collect();
    let mut growth = 0.0f64;
    for &j in &nodes {
        let x = sp.point(j);
        let r = 1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..=steps {
            growth = growth.max(s.value(i, j).abs() / r);
        }
    }

    let stride = steps.div_ceil(MAX_SLICES - 1).max(1);
    let mut picks: Vec<usize> = (0..=steps).step_by(stride).collect();
    if *picks.last().unwrap() != steps {
        picks.push(steps);
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (a, &k) in picks.iter().enumerate() {
        for &l in &picks[a + 1..] {
            pairs.push((k, l));
        }
    }
    pairs.extend((0..steps).map(|i| (i, i + 1)));
    let mut modulus = 0.0f64;
    for (k, l) in pairs {
        let lag = (s.time.node(l) - s.time.node(k)).abs().sqrt();
        for &j in &nodes {
            modulus = modulus.max((s.value(l, j) - s.value(k, j)).abs() / lag);
        }
    }

    RegularityReport {
        window,
        lipschitz: slopes.iter().cloned().fold(0.0, f64::max),
        terminal_slope: terminal,
        lipschitz_drift: drift,
        growth,
        time_modulus: modulus,
        g_monotone_min: g.and_then(|g| g_monotone(s, g, window)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::TimeGrid;
    use crate::hjb::{SpaceGrid, SurfaceMeta};

    fn surface(n: usize, f: impl Fn(f64, &[f64]) -> f64) -> ValueSurface {
        let sp = SpaceGrid::cube(n, -2.0, 2.0, 17).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 16).unwrap();
        ValueSurface::from_fn(sp, tg, 1, SurfaceMeta::new("exact", "t", "0"), f)
    }

    #[test]
    fn constants_of_known_surfaces() {
        let s = surface(1, |t, x| x[0] * (2.0 - t));
        let r = regularity(&s, Some(&[1.0]), 10.0);
        assert!((r.lipschitz - 2.0).abs() < 1e-12);
        assert!((r.terminal_slope - 1.0).abs() < 1e-12);
        assert!((r.lipschitz_drift - 1.0).abs() < 1e-12);
        assert!((r.growth - 4.0 / 3.0).abs() < 1e-12);
        // |x| |t_k - t_l| / sqrt(|t_k - t_l|) peaks at x = 2, lag 1.
        assert!((r.time_modulus - 2.0).abs() < 1e-12);
        assert!(r.g_monotone_min.unwrap() >= 0.0);
    }

    #[test]
    fn monotonicity_along_g_in_two_dimensions() {
        let s = surface(2, |_, x| x[0] - x[1]);
        assert!(
            regularity(&s, Some(&[1.0, -1.0]), 10.0)
                .g_monotone_min
                .unwrap()
                >= 0.0
        );
        assert!(
            regularity(&s, Some(&[1.0, 1.0]), 10.0)
                .g_monotone_min
                .unwrap()
                >= -1e-15
        );
        assert!(
            regularity(&s, Some(&[-1.0, 0.0]), 10.0)
                .g_monotone_min
                .unwrap()
                < 0.0
        );
        assert!(regularity(&s, None, 10.0).g_monotone_min.is_none());
    }

    #[test]
    fn square_root_in_time_has_bounded_modulus() {
        let s = surface(1, |t, _| (1.0 - t).sqrt());
        let r = regularity(&s, None, 10.0);
        assert!(r.time_modulus <= 1.0 + 1e-12 && r.time_modulus > 0.99);
    }
}
