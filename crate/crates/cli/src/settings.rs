//! Run settings read from the optional `[grid]` and `[monte_carlo]` tables of
//! a problem config; everything else in the file describes the problem.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fbsdelab::model::{load_problem, ControlProblem, ProblemConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Time steps; the finite-difference solver picks its own when absent.
    pub steps: Option<usize>,
}

fn default_lo() -> f64 {
    -5.0
}
fn default_hi() -> f64 {
    5.0
}
fn default_nodes() -> usize {
    41
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            lo: default_lo(),
            hi: default_hi(),
            nodes: default_nodes(),
            steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub paths: Option<usize>,
    pub substeps: Option<usize>,
    pub antithetic: Option<bool>,
    /// Certified step cap; certified on the fly for `z`-coupled problems
    /// when absent.
    pub delta0: Option<f64>,
    /// Gradient bound for the certification.
    pub p_bound: Option<f64>,
}

pub struct Loaded {
    pub problem: ControlProblem,
    pub grid: GridSection,
    pub monte_carlo: MonteCarloSection,
    pub bytes: Vec<u8>,
}

fn section<T: for<'de> Deserialize<'de> + Default>(
    table: &mut toml::Table,
    key: &str,
) -> Result<T, CliError> {
    match table.remove(key) {
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| CliError::validation(format!("[{key}]: {e}"))),
        None => Ok(T::default()),
    }
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::validation(format!("{} is not UTF-8", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::validation(format!("{}: {e}", path.display())))?;
    let grid = section(&mut table, "grid")?;
    let monte_carlo = section(&mut table, "monte_carlo")?;
    let config: ProblemConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::validation(format!("{}: {e}", path.display())))?;
    let problem = load_problem(&config).map_err(|e| CliError::validation(e.to_string()))?;
    Ok(Loaded {
        problem,
        grid,
        monte_carlo,
        bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_sections_are_split_off() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        std::fs::write(
            &path,
            "[coefficients]\nbuiltin = \"identity\"\n[grid]\nnodes = 21\n[monte_carlo]\npaths = 64\n",
        )
        .unwrap();
        let l = load(&path).unwrap();
        assert_eq!(l.problem.name, "identity");
        assert_eq!(l.grid.nodes, 21);
        assert_eq!(l.grid.lo, -5.0);
        assert_eq!(l.monte_carlo.paths, Some(64));
        std::fs::write(
            &path,
            "[coefficients]\nbuiltin = \"identity\"\n[grid]\nnode = 21\n",
        )
        .unwrap();
        assert_eq!(load(&path).err().unwrap().code, 1);
    }
}
