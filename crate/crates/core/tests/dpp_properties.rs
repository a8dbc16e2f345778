use std::collections::BTreeMap;

use fbsdelab::dpp::{value_iteration, MonteCarloOptions};
use fbsdelab::fbsde::TimeGrid;
use fbsdelab::hjb::{SpaceGrid, ValueSurface};
use fbsdelab::model::{builtin, ControlProblem, ControlSet};
use fbsdelab::regularity::regularity;

fn problem(name: &str) -> ControlProblem {
    builtin(name, &BTreeMap::new()).unwrap()
}

fn dpp(p: &ControlProblem, nodes: usize, steps: usize, paths: usize, seed: u64) -> ValueSurface {
    let sp = SpaceGrid::cube(1, -3.0, 3.0, nodes).unwrap();
    let tg = TimeGrid::new(0.0, p.horizon, steps).unwrap();
    let mc = MonteCarloOptions {
        paths,
        seed,
        ..Default::default()
    };
    value_iteration(p, &sp, tg, &mc).unwrap()
}

/// Nodes where `a` falls below `b` by more than three combined standard errors.
fn shortfalls(a: &ValueSurface, b: &ValueSurface, slack: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..=a.steps() {
        for j in 0..a.space.len() {
            let se = (a.stderr_at(i, j).powi(2) + b.stderr_at(i, j).powi(2)).sqrt();
            let gap = b.value(i, j) - a.value(i, j);
            if gap > 3.0 * se + slack {
                out.push((i, j, gap));
            }
        }
    }
    out
}

#[test]
fn larger_control_sets_never_lower_the_value() {
    let full = problem("uncertain_vol");
    let sub = full.with_controls(ControlSet::finite(vec![vec![1.0], vec![1.5]]).unwrap());
    assert!(sub.controls.is_subset_of(&full.controls));
    let small = dpp(&sub, 13, 3, 512, 3);
    let large = dpp(&full, 13, 3, 512, 3);
    let floor = 1e-9 * large.scale();
    assert!(shortfalls(&large, &small, floor).is_empty());
    // With u = 2 available the value at the origin rises from about 1.5^2 to 2^2.
    let k = large.nearest_node(&[0.0]);
    assert!(large.value(0, k) - small.value(0, k) > 1.0);
}

#[test]
fn independent_seeds_agree_within_noise() {
    for name in ["identity", "monotone_drift", "uncertain_vol"] {
        let p = problem(name);
        let a = dpp(&p, 13, 3, 512, 1);
        let b = dpp(&p, 13, 3, 512, 2);
        // Problems without noise in their value agree to roundoff.
        let floor = 1e-9 * a.scale();
        let mut bad = shortfalls(&a, &b, floor);
        bad.extend(shortfalls(&b, &a, floor));
        assert!(bad.is_empty(), "{name}: {bad:?}");
        if name == "uncertain_vol" {
            assert_ne!(a.values, b.values);
        }
    }
}

#[test]
fn halving_the_step_does_not_lower_the_value() {
    let p = problem("uncertain_vol");
    let coarse = dpp(&p, 13, 2, 1024, 4);
    let fine = dpp(&p, 13, 4, 1024, 4);
    for j in 0..coarse.space.len() {
        let se = (coarse.stderr_at(0, j).powi(2) + fine.stderr_at(0, j).powi(2)).sqrt();
        assert!(
            fine.value(0, j) >= coarse.value(0, j) - 3.0 * se,
            "node {j}"
        );
    }
}

#[test]
fn regularity_of_dpp_surfaces() {
    for name in ["identity", "monotone_drift", "uncertain_vol"] {
        let p = problem(name);
        let coarse = dpp(&p, 13, 3, 512, 5);
        let fine = dpp(&p, 25, 3, 512, 5);
        let (rc, rf) = (
            regularity(&coarse, Some(&p.structure.g), 2.5),
            regularity(&fine, Some(&p.structure.g), 2.5),
        );
        for (what, a, b) in [
            ("lipschitz", rc.lipschitz, rf.lipschitz),
            ("growth", rc.growth, rf.growth),
        ] {
            assert!((a - b).abs() <= 0.2 * a.max(b), "{name} {what}: {a} vs {b}");
        }
        if name == "monotone_drift" {
            let floor = -10.0 * f64::EPSILON * fine.scale();
            assert!(rf.g_monotone_min.unwrap() >= floor);
            assert!(rc.g_monotone_min.unwrap() >= floor);
        }
    }
}

#[test]
fn worker_count_does_not_change_the_surface() {
    let p = problem("uncertain_vol");
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| dpp(&p, 9, 2, 128, 6))
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.values, b.values);
    assert_eq!(a.u_star, b.u_star);
    assert_eq!(a.stderr, b.stderr);
}
