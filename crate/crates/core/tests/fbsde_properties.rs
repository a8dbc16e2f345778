use std::collections::BTreeMap;

use proptest::prelude::*;

use fbsdelab::assumptions::{audit, certify_small_interval, ProbeOptions, SampleBox};
use fbsdelab::bench::picard_profile;
use fbsdelab::fbsde::regression::LocalBasis;
use fbsdelab::fbsde::{
    backward_semigroup, cost_functional, generate_paths, semigroup_solution, solve_fbsde,
    ControlProcess, FbsdeOptions, RegressionOptions, TimeGrid,
};
use fbsdelab::model::{builtin, load_problem_str, ControlProblem};

/// Nonlinear, uncoupled forward dynamics; no closed form.
fn wavy() -> ControlProblem {
    load_problem_str(
        r#"
        [dims]
        n = 1
        d = 1
        horizon = 1.0
        [coefficients]
        b = ["0.5*sin(x1)"]
        sigma = ["1"]
        f = "cos(x1) - 0.3*y"
        phi = "abs(x1)"
        [controls]
        points = [[0.0]]
        [structure]
        G = [1.0]
        K = 1.0
        [regime]
        kind = "small-interval"
        "#,
    )
    .unwrap()
}

fn stable(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

#[test]
fn chained_semigroup_reproduces_the_cost() {
    let p = wavy();
    let ctl = ControlProcess::Constant(0);
    let opts = FbsdeOptions::default();
    let (x0, k, steps, m) = ([0.4], 5, 10, 8192);
    let full = TimeGrid::new(0.0, 1.0, steps).unwrap();
    let ens = generate_paths(full, 1, m, 11, true).unwrap();
    let sol = solve_fbsde(&p, &ctl, 0.0, &x0, full, &ens, &opts).unwrap();

    // Y at t + delta regressed on X there, then pulled back over [0, delta].
    let pts: Vec<f64> = (0..m).map(|q| sol.x_at(k, q)[0]).collect();
    let ys: Vec<f64> = (0..m).map(|q| sol.y_at(k, q)).collect();
    let basis = LocalBasis::new(&pts, 1, &RegressionOptions::default()).unwrap();
    let fit = basis.fit(&pts, &ys, 1);
    let psi = |x: &[f64]| Ok(fit.eval1(x));
    let delta = full.node(k);
    let short = TimeGrid::new(0.0, delta, k).unwrap();
    let fresh = generate_paths(short, 1, m, 12, true).unwrap();
    let chained =
        semigroup_solution(&p, 0.0, &x0, delta, &ctl, &psi, short, &fresh, &opts).unwrap();
    let value = backward_semigroup(&p, 0.0, &x0, delta, &ctl, &psi, short, &fresh, &opts).unwrap();
    assert_eq!(value, chained.j);
    // Regression bias of the intermediate fit comes on top of the noise.
    let tol = 3.0 * (sol.stderr.powi(2) + chained.stderr.powi(2)).sqrt() + 1e-2;
    assert!(
        (chained.j - sol.j).abs() <= tol,
        "{} vs {} (tol {tol})",
        chained.j,
        sol.j
    );
}

/// `J(0, x)` for `x` in `-10..=10` on common random numbers.
fn costs(p: &ControlProblem, steps: usize, m: usize) -> Vec<(f64, f64)> {
    let g = TimeGrid::new(0.0, p.horizon, steps).unwrap();
    let ens = generate_paths(g, 1, m, 21, true).unwrap();
    (-10..=10)
        .map(|x| {
            let x = f64::from(x);
            let (j, _) = cost_functional(
                p,
                &ControlProcess::Constant(0),
                0.0,
                &[x],
                g,
                &ens,
                &Default::default(),
            )
            .unwrap();
            (x, j)
        })
        .collect()
}

#[test]
fn growth_and_lipschitz_constants_are_stable_under_refinement() {
    let p = wavy();
    let fitted = |steps| {
        let js = costs(&p, steps, 2048);
        let growth = js
            .iter()
            .map(|(x, j)| j.abs() / (1.0 + x.abs()))
            .fold(0.0, f64::max);
        let lip = js
            .windows(2)
            .map(|w| (w[1].1 - w[0].1).abs() / (w[1].0 - w[0].0))
            .fold(0.0, f64::max);
        (growth, lip)
    };
    let (g1, l1) = fitted(8);
    let (g2, l2) = fitted(16);
    assert!(g1.is_finite() && l1.is_finite());
    assert!(stable(g1, g2, 0.2), "growth {g1} vs {g2}");
    assert!(stable(l1, l2, 0.2), "lipschitz {l1} vs {l2}");
    // |phi| is 1-Lipschitz and the running reward is bounded by 1 over a unit horizon.
    assert!(l2 <= 2.5, "{l2}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cost_is_monotone_along_g(x in -5.0f64..5.0, xb in -5.0f64..5.0) {
        let p = builtin("monotone_drift", &BTreeMap::new()).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let ens = generate_paths(g, 1, 512, 3, true).unwrap();
        let ctl = ControlProcess::Constant(0);
        let opts = FbsdeOptions::default();
        let (j, se) = cost_functional(&p, &ctl, 0.0, &[x], g, &ens, &opts).unwrap();
        let (jb, seb) = cost_functional(&p, &ctl, 0.0, &[xb], g, &ens, &opts).unwrap();
        let gd = p.structure.g[0] * (x - xb);
        prop_assert!((j - jb) * gd >= -(3.0 * (se + seb) + 1e-9) * gd.abs(), "{j} {jb}");
    }
}

#[test]
fn picard_factor_is_bounded_by_the_contraction_constant() {
    for name in ["zcoupled", "zcoupled_controlled"] {
        let p = builtin(name, &BTreeMap::new()).unwrap();
        let report = audit(&p, &SampleBox::default_for(&p), 4096, 1).unwrap();
        // W = x, so the gradient bound is 1.
        let cert = certify_small_interval(&p, &report, 1.0, &ProbeOptions::default()).unwrap();
        let delta = cert.delta0.min(p.horizon);
        let t0 = p.horizon - delta;
        let g = TimeGrid::new(t0, p.horizon, 10).unwrap();
        let ens = generate_paths(g, 1, 16384, 5, true).unwrap();
        let opts = FbsdeOptions {
            delta0: Some(cert.delta0),
            ..Default::default()
        };
        let sol =
            solve_fbsde(&p, &ControlProcess::Constant(0), t0, &[1.0], g, &ens, &opts).unwrap();
        let (factor, monotone) = picard_profile(&sol.picard_residuals);
        assert!(
            sol.converged && monotone,
            "{name}: {:?}",
            sol.picard_residuals
        );
        assert!(
            factor <= cert.contraction_q + 0.1,
            "{name}: {factor} vs q = {}",
            cert.contraction_q
        );
    }
}
