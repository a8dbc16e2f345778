use std::path::{Path, PathBuf};

use serde::Serialize;

use fbsdelab::assumptions::{
    audit, certify_small_interval, AuditReport, Certificate, ProbeOptions, SampleBox,
};
use fbsdelab::bench::{run_bench, BenchConfig};
use fbsdelab::dpp::{feedback_from_surface, value_iteration, MonteCarloOptions};
use fbsdelab::fbsde::{generate_paths, solve_fbsde, ControlProcess, FbsdeOptions, TimeGrid};
use fbsdelab::hjb::{auto_time_grid, solve_hjb, HjbOptions, SpaceGrid};
use fbsdelab::io::{
    compare_surfaces, read_surface, sidecar_path, write_json, write_surface, write_trajectories,
};
use fbsdelab::model::ControlProblem;
use fbsdelab::rng::substream_seed;
use fbsdelab::viscosity::{check_viscosity, EventKind, TestFamily, TolRule};

use crate::settings::{load, GridSection, Loaded, MonteCarloSection};
use crate::{
    BenchArgs, CheckArgs, CliError, CompareArgs, DppArgs, HjbArgs, SimulateArgs, ViscosityArgs,
};

/// What a subcommand produced: files relative to the output directory and
/// the hash of its config, if any.
pub struct Outcome {
    pub outputs: Vec<String>,
    pub config_hash: Option<String>,
    /// Exit status when the run itself succeeded but reports a failure.
    pub status: i32,
}

fn outcome(outputs: Vec<String>, loaded: Option<&Loaded>) -> Outcome {
    Outcome {
        outputs,
        config_hash: loaded.map(|l| crate::manifest::hash_bytes(&l.bytes)),
        status: 0,
    }
}

fn name_of(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn surface_outputs(path: &Path) -> Vec<String> {
    vec![name_of(path), name_of(&sidecar_path(path))]
}

fn space_grid(
    problem: &ControlProblem,
    grid: &GridSection,
    nodes: Option<usize>,
) -> Result<SpaceGrid, CliError> {
    Ok(SpaceGrid::cube(
        problem.n,
        grid.lo,
        grid.hi,
        nodes.unwrap_or(grid.nodes),
    )?)
}

/// Largest slope of the terminal function between neighbouring grid nodes.
fn terminal_slope(problem: &ControlProblem, sp: &SpaceGrid) -> Result<f64, CliError> {
    let vals: Vec<f64> = (0..sp.len())
        .map(|j| problem.coefficients.terminal(&sp.point(j)))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::validation(format!("terminal function: {e}")))?;
    let mut m = 0.0f64;
    for j in 0..sp.len() {
        let idx = sp.multi(j);
        for a in 0..sp.dim() {
            if idx[a] + 1 < sp.count[a] {
                let mut nb = idx.clone();
                nb[a] += 1;
                m = m.max((vals[sp.flat(&nb)] - vals[j]).abs() / sp.h(a));
            }
        }
    }
    Ok(m)
}

fn needs_certificate(problem: &ControlProblem) -> bool {
    problem.dependence().sigma_on_z
}

fn certify(
    problem: &ControlProblem,
    report: &AuditReport,
    mc: &MonteCarloSection,
    sp: &SpaceGrid,
    seed: u64,
) -> Result<Certificate, CliError> {
    let p_bound = match mc.p_bound {
        Some(p) => p,
        None => terminal_slope(problem, sp)?,
    };
    let opts = ProbeOptions {
        seed,
        ..Default::default()
    };
    Ok(certify_small_interval(problem, report, p_bound, &opts)?)
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    problem: &'a str,
    audit: &'a AuditReport,
    b2_passes: bool,
    certificate: Option<Certificate>,
}

pub fn check(args: &CheckArgs, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let loaded = load(&args.config)?;
    let p = &loaded.problem;
    let report = audit(p, &SampleBox::default_for(p), args.samples, seed)?;
    let certificate = if needs_certificate(p) {
        let sp = space_grid(p, &loaded.grid, None)?;
        Some(certify(p, &report, &loaded.monte_carlo, &sp, seed)?)
    } else {
        None
    };
    println!("problem            {}", p.name);
    println!("regime             {:?}", p.regime);
    println!("K (sampled)        {:.6e}", report.k_hat);
    println!("L_sigma (sampled)  {:.6e}", report.lsigma_hat);
    println!(
        "monotone slack     {:.6e}  {}",
        report.b2_monotone_slack,
        verdict(report.b2_monotone_slack <= 1e-12)
    );
    println!(
        "terminal slack     {:.6e}  {}",
        report.b2ii_slack,
        verdict(report.b2ii_slack <= 1e-12)
    );
    println!("growth constant    {:.6e}", report.growth_c);
    println!(
        "continuity modulus {:.6e} (radius {})",
        report.b7_modulus, report.b7_radius
    );
    println!("beta2 > 0          {}", report.b6_beta2_positive);
    if let Some(c) = &certificate {
        println!("delta0             {:.6e}", c.delta0);
        println!("contraction q      {:.6e}", c.contraction_q);
        println!("Picard factor      {:.6e}", c.picard_factor);
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    println!("note: {}", report.note);
    let path = out.join("audit.json");
    write_json(
        &path,
        &CheckOutput {
            problem: &p.name,
            audit: &report,
            b2_passes: report.b2_passes(),
            certificate,
        },
    )?;
    Ok(outcome(vec![name_of(&path)], Some(&loaded)))
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

#[derive(Serialize)]
struct SimulateOutput {
    problem: String,
    control: String,
    t0: f64,
    x0: Vec<f64>,
    steps: usize,
    paths: usize,
    j: f64,
    stderr: f64,
    picard_iterations: usize,
    picard_residuals: Vec<f64>,
    converged: bool,
}

pub fn simulate(args: &SimulateArgs, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let loaded = load(&args.config)?;
    let p = &loaded.problem;
    let x0 = if args.x0.is_empty() {
        vec![0.0; p.n]
    } else {
        args.x0.clone()
    };
    let control = match args.control.parse::<usize>() {
        Ok(i) => {
            if i >= p.controls.len() {
                return Err(CliError::validation(format!(
                    "control index {i} outside the control set of size {}",
                    p.controls.len()
                )));
            }
            ControlProcess::Constant(i)
        }
        Err(_) => feedback_from_surface(&read_surface(&PathBuf::from(&args.control))?)?,
    };
    let steps = args.steps.or(loaded.grid.steps).unwrap_or(50);
    let paths = args.paths.or(loaded.monte_carlo.paths).unwrap_or(4096);
    let antithetic = loaded.monte_carlo.antithetic.unwrap_or(true);
    let grid = TimeGrid::new(args.t0, p.horizon, steps)?;
    let ens = generate_paths(
        grid,
        p.d,
        paths,
        substream_seed(seed, "simulate", &[]),
        antithetic,
    )?;
    let opts = FbsdeOptions {
        delta0: loaded.monte_carlo.delta0,
        ..Default::default()
    };
    let sol = solve_fbsde(p, &control, args.t0, &x0, grid, &ens, &opts)?;
    println!(
        "J = {:.10e} +/- {:.3e} (Picard sweeps {})",
        sol.j, sol.stderr, sol.picard_iterations
    );
    let traj = out.join("trajectories.csv");
    write_trajectories(&traj, &sol, args.dump)?;
    let summary = out.join("simulate.json");
    write_json(
        &summary,
        &SimulateOutput {
            problem: p.name.clone(),
            control: args.control.clone(),
            t0: args.t0,
            x0,
            steps,
            paths,
            j: sol.j,
            stderr: sol.stderr,
            picard_iterations: sol.picard_iterations,
            picard_residuals: sol.picard_residuals.clone(),
            converged: sol.converged,
        },
    )?;
    Ok(outcome(
        vec![name_of(&summary), name_of(&traj)],
        Some(&loaded),
    ))
}

pub fn hjb(args: &HjbArgs, out: &Path) -> Result<Outcome, CliError> {
    let loaded = load(&args.config)?;
    let p = &loaded.problem;
    let sp = space_grid(p, &loaded.grid, args.nodes)?;
    let opts = HjbOptions {
        upwind: args.upwind,
        ..Default::default()
    };
    let time = match args.steps.or(loaded.grid.steps) {
        Some(n) => TimeGrid::new(0.0, p.horizon, n)?,
        None => auto_time_grid(p, &sp, 0.0, &opts)?,
    };
    let s = solve_hjb(p, &sp, time, &opts)?;
    let path = out.join("hjb.csv");
    write_surface(&path, &s)?;
    let origin = vec![0.0; p.n];
    println!(
        "hjb: {} nodes x {} steps, CFL max {:.3}, W(0, 0) = {:.10e}",
        sp.len(),
        time.steps,
        s.meta.cfl_max.unwrap_or(0.0),
        s.interp(0.0, &origin)
    );
    Ok(outcome(surface_outputs(&path), Some(&loaded)))
}

pub fn dpp(args: &DppArgs, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let loaded = load(&args.config)?;
    let p = &loaded.problem;
    let mc = &loaded.monte_carlo;
    let sp = space_grid(p, &loaded.grid, args.nodes)?;
    let mut opts = MonteCarloOptions {
        paths: args.paths.or(mc.paths).unwrap_or(4096),
        antithetic: mc.antithetic.unwrap_or(true),
        seed,
        substeps: mc.substeps.unwrap_or(1),
        ..Default::default()
    };
    let mut steps = args.steps.or(loaded.grid.steps).unwrap_or(10);
    let delta0 = match mc.delta0 {
        Some(d) => Some(d),
        None if needs_certificate(p) => {
            let report = audit(p, &SampleBox::default_for(p), 4096, seed)?;
            Some(certify(p, &report, mc, &sp, seed)?.delta0)
        }
        None => None,
    };
    if let Some(d) = delta0 {
        let needed = (p.horizon / d - 1e-9).ceil().max(1.0) as usize;
        if needed > steps {
            log::warn!("raising the step count from {steps} to {needed} to respect delta0 = {d}");
            steps = needed;
        }
        opts.delta0 = Some(d);
        opts.fbsde.delta0 = Some(d);
    }
    let time = TimeGrid::new(0.0, p.horizon, steps)?;
    let s = value_iteration(p, &sp, time, &opts)?;
    let path = out.join("dpp.csv");
    write_surface(&path, &s)?;
    let origin = vec![0.0; p.n];
    let k = s.nearest_node(&origin);
    println!(
        "dpp: {} nodes x {} steps, {} paths, W(0, x_k) = {:.10e} +/- {:.3e} at x_k = {:?}",
        sp.len(),
        steps,
        opts.paths,
        s.value(0, k),
        s.stderr_at(0, k),
        sp.point(k)
    );
    Ok(outcome(surface_outputs(&path), Some(&loaded)))
}

pub fn compare(args: &CompareArgs, out: &Path) -> Result<Outcome, CliError> {
    let loaded = args.config.as_deref().map(load).transpose()?;
    let a = read_surface(&args.a)?;
    let b = read_surface(&args.b)?;
    if a.space.dim() != b.space.dim() {
        return Err(CliError::validation(
            "surfaces have different state dimensions",
        ));
    }
    let r = compare_surfaces(&a, &b);
    println!(
        "compare: {} nodes, max |diff| = {:.6e}, mean |diff| = {:.6e}, max |z| = {}",
        r.nodes,
        r.max_abs_diff,
        r.mean_abs_diff,
        r.max_abs_z.map_or("n/a".into(), |z| format!("{z:.3}"))
    );
    let path = out.join("compare.json");
    write_json(&path, &r)?;
    Ok(outcome(vec![name_of(&path)], loaded.as_ref()))
}

#[derive(Serialize)]
struct ViscositySummary<'a> {
    problem: &'a str,
    tolerance: TolRule,
    violations: usize,
    worst_sub: f64,
    worst_super: f64,
    report: &'a fbsdelab::viscosity::ViscosityReport,
}

pub fn viscosity(args: &ViscosityArgs, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let loaded = load(&args.config)?;
    let p = &loaded.problem;
    let s = read_surface(&args.surface)?;
    let tol = match (args.truncation, args.tol) {
        (Some(_), Some(_)) => {
            return Err(CliError::validation(
                "--tol and --truncation are mutually exclusive",
            ))
        }
        (Some(k), None) => TolRule::Truncation(k),
        (None, Some(t)) => TolRule::Fixed(t),
        (None, None) => TolRule::Fixed(1e-6 * s.scale()),
    };
    let family = TestFamily {
        seed,
        max_nodes: args.max_nodes,
        ..Default::default()
    };
    let r = check_viscosity(p, &s, &family, tol)?;
    println!(
        "viscosity: {} events, {} sub and {} super violations, {} terminal, {} boundary nodes skipped",
        r.events.len(),
        r.sub_violations,
        r.super_violations,
        r.terminal_sub_violations + r.terminal_super_violations,
        r.skipped_boundary
    );
    let path = out.join("viscosity.json");
    write_json(
        &path,
        &ViscositySummary {
            problem: &p.name,
            tolerance: tol,
            violations: r.violations(),
            worst_sub: r.worst(EventKind::Sub, None),
            worst_super: r.worst(EventKind::Super, None),
            report: &r,
        },
    )?;
    Ok(outcome(vec![name_of(&path)], Some(&loaded)))
}

pub fn bench(args: &BenchArgs, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let mut cfg = if args.quick {
        BenchConfig::quick()
    } else {
        BenchConfig::default()
    };
    cfg.seed = seed;
    if let Some(p) = args.paths {
        cfg.paths = p;
    }
    let report = run_bench(&cfg)?;
    print!("{}", report.table());
    let passed = report.passed();
    println!(
        "{} of {} checks passed",
        report.rows.iter().filter(|r| r.pass).count(),
        report.rows.len()
    );
    let path = out.join("bench.json");
    write_json(&path, &report)?;
    let mut o = outcome(vec![name_of(&path)], None);
    if !passed {
        o.status = 3;
    }
    Ok(o)
}
