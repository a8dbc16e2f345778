//! Artifacts: surfaces as CSV plus a JSON sidecar, trajectory dumps, JSON
//! reports and surface comparison.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), so files
//! round-trip exactly and identical runs give identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde::{FbsdeSolution, TimeGrid};
use crate::hjb::{SpaceGrid, SurfaceMeta, ValueSurface};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Grid and metadata stored next to a surface CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSidecar {
    pub space: SpaceGrid,
    pub time: TimeGrid,
    pub d: usize,
    pub meta: SurfaceMeta,
    pub columns: Vec<String>,
}

/// `surface.csv` gets `surface.json` as its sidecar.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn columns(s: &ValueSurface) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    c.extend((1..=s.space.dim()).map(|a| format!("x{a}")));
    c.push("W".into());
    if s.u_star.is_some() {
        c.push("u_star".into());
    }
    if s.stderr.is_some() {
        c.push("stderr".into());
    }
    if s.v_star.is_some() {
        c.extend((1..=s.d).map(|k| format!("V{k}")));
    }
    c
}

/// Writes `path` (one row per node, slice by slice) and its sidecar.
pub fn write_surface(path: &Path, s: &ValueSurface) -> Result<(), IoError> {
    let cols = columns(s);
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(&cols).map_err(csv_err(path))?;
    for i in 0..=s.steps() {
        let t = s.time.node(i);
        for j in 0..s.space.len() {
            let mut row = vec![fmt_f64(t)];
            row.extend(s.space.point(j).into_iter().map(fmt_f64));
            row.push(fmt_f64(s.value(i, j)));
            if let Some(u) = s.u_star_at(i, j) {
                row.push(u.to_string());
            }
            if s.stderr.is_some() {
                row.push(fmt_f64(s.stderr_at(i, j)));
            }
            if let Some(v) = s.v_star_at(i, j) {
                row.extend(v.iter().copied().map(fmt_f64));
            }
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))?;
    let side = SurfaceSidecar {
        space: s.space.clone(),
        time: s.time,
        d: s.d,
        meta: s.meta.clone(),
        columns: cols,
    };
    write_json(&sidecar_path(path), &side)
}

pub fn read_surface(path: &Path) -> Result<ValueSurface, IoError> {
    let side: SurfaceSidecar = read_json(&sidecar_path(path))?;
    let bad = |msg: String| IoError::Format {
        path: path.display().to_string(),
        msg,
    };
    let mut s = ValueSurface::zeros(side.space.clone(), side.time, side.d, side.meta.clone());
    let len = s.space.len();
    let total = (s.steps() + 1) * len;
    let col = |name: &str| side.columns.iter().position(|c| c == name);
    let w_col = col("W").ok_or_else(|| bad("no W column".into()))?;
    let u_col = col("u_star");
    let se_col = col("stderr");
    let v_cols: Option<Vec<usize>> = (1..=side.d).map(|k| col(&format!("V{k}"))).collect();
    let mut u_star = u_col.map(|_| vec![0usize; total]);
    let mut stderr = se_col.map(|_| vec![0.0; total]);
    let mut v_star = v_cols.as_ref().map(|_| vec![0.0; total * side.d]);
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(String::from)
        .collect();
    if header != side.columns {
        return Err(bad(format!("header {header:?} does not match the sidecar")));
    }
    let mut rows = 0;
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if k >= total {
            return Err(bad(format!("more than {total} rows")));
        }
        let num = |c: usize| -> Result<f64, IoError> {
            rec[c]
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: column {c}: {e}", k + 2)))
        };
        s.values[k] = num(w_col)?;
        if let (Some(u), Some(c)) = (u_star.as_mut(), u_col) {
            u[k] = rec[c]
                .parse()
                .map_err(|e| bad(format!("row {}: u_star: {e}", k + 2)))?;
        }
        if let (Some(se), Some(c)) = (stderr.as_mut(), se_col) {
            se[k] = num(c)?;
        }
        if let (Some(v), Some(cs)) = (v_star.as_mut(), v_cols.as_ref()) {
            for (a, &c) in cs.iter().enumerate() {
                v[k * side.d + a] = num(c)?;
            }
        }
        rows += 1;
    }
    if rows != total {
        return Err(bad(format!("expected {total} rows, found {rows}")));
    }
    s.u_star = u_star;
    s.stderr = stderr;
    s.v_star = v_star;
    Ok(s)
}

/// The first `max_paths` trajectories as rows `t, path, X.., Y, Z..`.
pub fn write_trajectories(
    path: &Path,
    sol: &FbsdeSolution,
    max_paths: usize,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut head = vec!["t".to_string(), "path".to_string()];
    head.extend((1..=sol.n).map(|a| format!("X{a}")));
    head.push("Y".into());
    head.extend((1..=sol.d).map(|a| format!("Z{a}")));
    w.write_record(&head).map_err(csv_err(path))?;
    for p in 0..sol.m.min(max_paths) {
        for i in 0..=sol.grid.steps {
            let mut row = vec![fmt_f64(sol.grid.node(i)), p.to_string()];
            row.extend(sol.x_at(i, p).iter().copied().map(fmt_f64));
            row.push(fmt_f64(sol.y_at(i, p)));
            row.extend(sol.z_at(i, p).iter().copied().map(fmt_f64));
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub nodes: usize,
    /// Whether `b` was read on `a`'s nodes directly (else interpolated).
    pub same_grid: bool,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    /// `(a - b) / sqrt(se_a^2 + se_b^2)` per node of `a`; `None` where both
    /// standard errors vanish.
    pub z_scores: Vec<Option<f64>>,
    pub max_abs_z: Option<f64>,
}

/// Compares `b` against `a` on the nodes of `a`.
pub fn compare_surfaces(a: &ValueSurface, b: &ValueSurface) -> CompareReport {
    let same = a.space == b.space && a.time == b.time;
    let len = a.space.len();
    let mut diffs = Vec::with_capacity(a.values.len());
    let mut z = Vec::with_capacity(a.values.len());
    for i in 0..=a.steps() {
        let t = a.time.node(i);
        for j in 0..len {
            let (vb, seb) = if same {
                (b.value(i, j), b.stderr_at(i, j))
            } else {
                let x = a.space.point(j);
                let se = b.stderr.as_ref().map_or(0.0, |_| {
                    let k = b.nearest_node(&x);
                    let r = ((t - b.time.t0) / b.time.dt())
                        .round()
                        .clamp(0.0, b.steps() as f64);
                    b.stderr_at(r as usize, k)
                });
                (b.interp(t, &x), se)
            };
            let d = a.value(i, j) - vb;
            diffs.push(d.abs());
            let se = (a.stderr_at(i, j).powi(2) + seb.powi(2)).sqrt();
            z.push((se > 0.0).then(|| d / se));
        }
    }
    let max_abs_z = z.iter().flatten().map(|v| v.abs()).reduce(f64::max);
    CompareReport {
        nodes: diffs.len(),
        same_grid: same,
        max_abs_diff: diffs.iter().cloned().fold(0.0, f64::max),
        mean_abs_diff: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
        z_scores: z,
        max_abs_z,
    }
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ValueSurface {
        let sp = SpaceGrid::new(&[-1.0, 0.0], &[1.0, 1.0], &[5, 5]).unwrap();
        let tg = TimeGrid::new(0.0, 0.5, 3).unwrap();
        let mut s =
            ValueSurface::from_fn(sp, tg, 2, SurfaceMeta::new("dpp", "p", "abc"), |t, x| {
                (t + 0.1).exp() * x[0] - x[1] / 3.0
            });
        let len = s.values.len();
        s.u_star = Some((0..len).map(|k| k % 3).collect());
        s.stderr = Some((0..len).map(|k| k as f64 * 1e-3 / 7.0).collect());
        s.v_star = Some((0..2 * len).map(|k| (k as f64).sqrt()).collect());
        s
    }

    #[test]
    fn surfaces_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let s = sample();
        write_surface(&path, &s).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = read_surface(&path).unwrap();
        assert_eq!(back, s);
        // Identical input, identical bytes.
        let again = dir.path().join("w2.csv");
        write_surface(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn comparison_of_a_surface_with_itself_is_zero() {
        let s = sample();
        let r = compare_surfaces(&s, &s);
        assert_eq!(r.max_abs_diff, 0.0);
        assert!(r.same_grid);
        assert_eq!(r.max_abs_z, Some(0.0));
        let mut t = s.clone();
        t.values[7] += 0.5;
        let r = compare_surfaces(&s, &t);
        assert_eq!(r.max_abs_diff, 0.5);
        assert!((r.mean_abs_diff - 0.5 / s.values.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn truncated_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        write_surface(&path, &sample()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(10).collect();
        fs::write(&path, cut.join("\n")).unwrap();
        assert!(matches!(read_surface(&path), Err(IoError::Format { .. })));
    }
}
