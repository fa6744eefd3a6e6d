//! Central finite-difference checks for every autodiff primitive and for
//! the full generator -> target -> total loss graph, in f64.

use std::time::Instant;

use ssat_core::attack::gradcheck::composite_suite;
use ssat_core::tensor::{primitive_suite, GradCheckCase};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TOL: f64 = 1e-3;

fn assert_all(cases: &[GradCheckCase]) {
    for c in cases {
        assert!(c.rel_error < TOL, "{} seed {} shape {:?}: relative error {}", c.name, c.seed, c.shape, c.rel_error);
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in SEEDS {
        let cases = primitive_suite(seed).unwrap();
        assert!(cases.len() > 30);
        assert_all(&cases);
    }
}

#[test]
fn primitives_are_checked_on_two_shapes() {
    let cases = primitive_suite(1).unwrap();
    let mut names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
    names.dedup();
    for name in names {
        let shapes: std::collections::BTreeSet<_> = cases.iter().filter(|c| c.name == name).map(|c| c.shape.clone()).collect();
        assert!(shapes.len() >= 2, "{name} checked on {shapes:?}");
    }
}

#[test]
fn composite_attack_graph_matches_finite_differences() {
    let start = Instant::now();
    for seed in SEEDS {
        assert_all(&composite_suite(seed).unwrap());
    }
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
}
