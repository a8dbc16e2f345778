use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    builtin, Coefficients, ControlProblem, ControlSet, Dependence, ModelError, MonotoneStructure,
    Point, Regime,
};
use crate::exprdsl::{parse, Dims, EvalError, Expr, Tape, Var};

/// Problem configuration document (TOML).
///
/// ```toml
/// [dims]
/// n = 1
/// d = 1
/// horizon = 1.0
///
/// [coefficients]
/// b = ["0"]
/// sigma = ["1 + 0.5*z1"]   # n*d entries, row-major
/// f = "0"
/// phi = "x1"
/// # or: builtin = "zcoupled" with params = { epsilon = 0.5 }
///
/// [controls]
/// points = [[0.0]]         # or lo = [1.0], hi = [2.0], count = [11]
///
/// [structure]
/// G = [1.0]
/// beta1 = 0.0
/// beta2 = 0.0
/// mu1 = 0.0
/// K = 1.0
/// L_sigma = 0.5
///
/// [regime]
/// kind = "small-interval"  # or "monotone"
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: Option<String>,
    pub dims: Option<DimsSection>,
    pub coefficients: CoefficientsSection,
    pub controls: Option<ControlsSection>,
    pub structure: Option<StructureSection>,
    pub regime: Option<RegimeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsSection {
    pub n: usize,
    pub d: usize,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    pub builtin: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub b: Option<Vec<String>>,
    pub sigma: Option<Vec<String>>,
    pub f: Option<String>,
    pub phi: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    pub points: Option<Vec<Vec<f64>>>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub count: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSection {
    #[serde(rename = "G")]
    pub g: Vec<f64>,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
    #[serde(default)]
    pub mu1: f64,
    #[serde(rename = "K")]
    pub k_lip: f64,
    #[serde(rename = "L_sigma", default)]
    pub l_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    pub kind: String,
}

impl ControlsSection {
    fn realize(&self) -> Result<ControlSet, ModelError> {
        match (&self.points, &self.lo, &self.hi, &self.count) {
            (Some(points), None, None, None) => ControlSet::finite(points.clone()),
            (None, Some(lo), Some(hi), Some(count)) => ControlSet::boxed(lo, hi, count),
            (None, _, _, _) => Err(ModelError::MissingField(
                "controls: need either points or lo/hi/count".into(),
            )),
            _ => Err(ModelError::Config(
                "controls: points and lo/hi/count are mutually exclusive".into(),
            )),
        }
    }
}

impl StructureSection {
    fn realize(&self) -> MonotoneStructure {
        MonotoneStructure {
            g: self.g.clone(),
            beta1: self.beta1,
            beta2: self.beta2,
            mu1: self.mu1,
            k_lip: self.k_lip,
            l_sigma: self.l_sigma,
        }
    }
}

impl ProblemConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }
}

/// Coefficients given as expressions, compiled to instruction tapes.
#[derive(Debug, Clone)]
pub struct ExprCoefficients {
    dims: Dims,
    pub b: Vec<Expr>,
    pub sigma: Vec<Expr>,
    pub f: Expr,
    pub phi: Expr,
    b_tape: Vec<Tape>,
    sigma_tape: Vec<Tape>,
    f_tape: Tape,
    phi_tape: Tape,
    dependence: Dependence,
}

impl ExprCoefficients {
    pub fn new(
        dims: Dims,
        b: &[String],
        sigma: &[String],
        f: &str,
        phi: &str,
    ) -> Result<Self, ModelError> {
        if b.len() != dims.n {
            return Err(ModelError::DimensionMismatch(format!(
                "b has {} entries, expected n = {}",
                b.len(),
                dims.n
            )));
        }
        if sigma.len() != dims.n * dims.d {
            return Err(ModelError::DimensionMismatch(format!(
                "sigma has {} entries, expected n*d = {}",
                sigma.len(),
                dims.n * dims.d
            )));
        }
        let p = |field: String, src: &str, dims: Dims| {
            parse(src, dims).map_err(|source| ModelError::Expression { field, source })
        };
        let b: Vec<Expr> = b
            .iter()
            .enumerate()
            .map(|(i, s)| p(format!("b[{i}]"), s, dims))
            .collect::<Result<_, _>>()?;
        let sigma: Vec<Expr> = sigma
            .iter()
            .enumerate()
            .map(|(i, s)| p(format!("sigma[{i}]"), s, dims))
            .collect::<Result<_, _>>()?;
        let f = p("f".into(), f, dims)?;
        // Phi only sees the state.
        let phi = p("phi".into(), phi, Dims::new(dims.n, 0, 0))?;
        if phi.references(&|v| v == Var::T || v == Var::Y) {
            return Err(ModelError::Config("phi may only reference x1..xn".into()));
        }
        let on_y = |es: &[Expr]| es.iter().any(|e| e.references(&|v| v == Var::Y));
        let on_z = |es: &[Expr]| es.iter().any(|e| e.references(&|v| matches!(v, Var::Z(_))));
        let dependence = Dependence {
            drift_on_y: on_y(&b),
            drift_on_z: on_z(&b),
            sigma_on_y: on_y(&sigma),
            sigma_on_z: on_z(&sigma),
        };
        Ok(Self {
            dims,
            b_tape: b.iter().map(Expr::compile).collect(),
            sigma_tape: sigma.iter().map(Expr::compile).collect(),
            f_tape: f.compile(),
            phi_tape: phi.compile(),
            b,
            sigma,
            f,
            phi,
            dependence,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
}

impl Coefficients for ExprCoefficients {
    fn drift(&self, p: &Point<'_>, out: &mut [f64]) -> Result<(), EvalError> {
        for (o, tape) in out.iter_mut().zip(&self.b_tape) {
            *o = tape.eval(p)?;
        }
        Ok(())
    }

    fn diffusion(&self, p: &Point<'_>, out: &mut [f64]) -> Result<(), EvalError> {
        for (o, tape) in out.iter_mut().zip(&self.sigma_tape) {
            *o = tape.eval(p)?;
        }
        Ok(())
    }

    fn driver(&self, p: &Point<'_>) -> Result<f64, EvalError> {
        self.f_tape.eval(p)
    }

    fn terminal(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.phi_tape.eval(&Point {
            t: 0.0,
            x,
            y: 0.0,
            z: &[],
            u: &[],
        })
    }

    fn dependence(&self) -> Dependence {
        self.dependence
    }
}

/// Build and validate a problem from a parsed configuration.
pub fn load_problem(config: &ProblemConfig) -> Result<ControlProblem, ModelError> {
    let coeffs = &config.coefficients;
    let mut problem = if let Some(name) = &coeffs.builtin {
        if coeffs.b.is_some()
            || coeffs.sigma.is_some()
            || coeffs.f.is_some()
            || coeffs.phi.is_some()
        {
            return Err(ModelError::Config(
                "coefficients: builtin excludes b/sigma/f/phi expressions".into(),
            ));
        }
        let mut params = coeffs.params.clone();
        if let Some(h) = config.dims.as_ref().and_then(|d| d.horizon) {
            params.insert("T".into(), h);
        }
        let mut p = builtin(name, &params)?;
        if let Some(dims) = &config.dims {
            if dims.n != p.n || dims.d != p.d {
                return Err(ModelError::DimensionMismatch(format!(
                    "builtin {name} has n = {}, d = {}; config declares n = {}, d = {}",
                    p.n, p.d, dims.n, dims.d
                )));
            }
        }
        if let Some(c) = &config.controls {
            let controls = c.realize()?;
            if controls.dim() != p.control_dim() {
                return Err(ModelError::DimensionMismatch(format!(
                    "builtin {name} expects {}-dimensional controls",
                    p.control_dim()
                )));
            }
            p.controls = controls;
        }
        if let Some(s) = &config.structure {
            p.structure = s.realize();
        }
        if let Some(r) = &config.regime {
            p.regime = r.kind.parse()?;
        }
        p
    } else {
        let dims = config
            .dims
            .as_ref()
            .ok_or_else(|| ModelError::MissingField("dims".into()))?;
        let horizon = dims
            .horizon
            .ok_or_else(|| ModelError::MissingField("dims.horizon".into()))?;
        let controls = config
            .controls
            .as_ref()
            .ok_or_else(|| ModelError::MissingField("controls".into()))?
            .realize()?;
        let structure = config
            .structure
            .as_ref()
            .ok_or_else(|| ModelError::MissingField("structure".into()))?
            .realize();
        let regime: Regime = config
            .regime
            .as_ref()
            .ok_or_else(|| ModelError::MissingField("regime".into()))?
            .kind
            .parse()?;
        let b: Vec<String> = need(&coeffs.b, "b")?;
        let sigma: Vec<String> = need(&coeffs.sigma, "sigma")?;
        let f: String = need(&coeffs.f, "f")?;
        let phi: String = need(&coeffs.phi, "phi")?;
        let edims = Dims::new(dims.n, dims.d, controls.dim());
        let ec = ExprCoefficients::new(edims, &b, &sigma, &f, &phi)?;
        ControlProblem {
            name: config.name.clone().unwrap_or_else(|| "custom".into()),
            n: dims.n,
            d: dims.d,
            horizon,
            coefficients: Arc::new(ec),
            controls,
            structure,
            regime,
            builtin: None,
        }
    };
    if let Some(name) = &config.name {
        problem.name = name.clone();
    }
    problem.validate()?;
    Ok(problem)
}

fn need<T: Clone>(v: &Option<T>, name: &str) -> Result<T, ModelError> {
    v.clone()
        .ok_or_else(|| ModelError::MissingField(format!("coefficients.{name}")))
}

pub fn load_problem_str(text: &str) -> Result<ControlProblem, ModelError> {
    load_problem(&ProblemConfig::from_toml_str(text)?)
}

pub fn load_problem_file(path: impl AsRef<Path>) -> Result<ControlProblem, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_problem_str(&text)
}
