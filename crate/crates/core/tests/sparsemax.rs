mod common;

use common::{normal_vec, rng, simplex_projection_oracle};
use hiersparse::normalize::Mask;
use hiersparse::sparsemax::{sparsemax, sparsemax_backward, sparsemax_rows};
use hiersparse::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn project(z: &[f64]) -> Vec<f64> {
    sparsemax(z).unwrap().probs.into_data()
}

#[test]
fn oracle_agrees_with_known_projection() {
    let p = simplex_projection_oracle(&[0.5, 0.1, -0.2], 10_000);
    for (a, b) in p.iter().zip([0.7, 0.3, 0.0]) {
        assert!((a - b).abs() <= 1e-9, "{p:?}");
    }
}

#[test]
fn matches_brute_force_projection() {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..=10);
        let z = normal_vec(&mut r, n);
        let oracle = simplex_projection_oracle(&z, 10_000);
        for (a, b) in project(&z).iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "max abs diff {worst:e}");
}

#[test]
fn outputs_are_distributions_with_consistent_support() {
    let mut r = rng(12);
    for _ in 0..500 {
        let n = r.random_range(1..=12);
        let z: Vec<f64> = normal_vec(&mut r, n).iter().map(|x| 3.0 * x).collect();
        let res = sparsemax(&z).unwrap();
        let p = res.probs.data();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (&pi, &s) in p.iter().zip(&res.support) {
            assert!(pi >= 0.0);
            assert_eq!(s, pi > 0.0);
        }
        let tau = res.tau[0];
        for (&pi, &zi) in p.iter().zip(&z) {
            assert!((pi - (zi - tau).max(0.0)).abs() <= 1e-12);
        }
    }
}

#[test]
fn shift_invariance_is_exact() {
    let z = [0.5, 0.125, -0.1875, 0.25, 0.40625];
    let base = project(&z);
    for c in [0.25, -4.0, 1024.0, 3.0] {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        assert_eq!(project(&shifted), base, "shift {c}");
    }
}

#[test]
fn projecting_a_simplex_point_returns_it() {
    let mut r = rng(13);
    for _ in 0..200 {
        let n = r.random_range(2..=10);
        let p = project(&normal_vec(&mut r, n));
        let again = project(&p);
        for (a, b) in p.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn sparse_on_most_normal_draws() {
    let mut r = rng(14);
    let sparse = (0..1000).filter(|_| sparsemax(&normal_vec(&mut r, 20)).unwrap().support_size(0) < 20).count();
    assert!(sparse >= 900, "{sparse} of 1000 draws were sparse");
}

#[test]
fn backward_matches_finite_differences_off_boundary() {
    let mut r = rng(15);
    let h = 1e-6;
    let mut checked = 0;
    while checked < 50 {
        let z = normal_vec(&mut r, 6);
        let res = sparsemax(&z).unwrap();
        let margin = z.iter().map(|&zi| (zi - res.tau[0]).abs()).fold(f64::INFINITY, f64::min);
        if margin < 1e-3 {
            continue;
        }
        let up = normal_vec(&mut r, 6);
        let analytic = sparsemax_backward(&Tensor::vector(up.clone()), &res).unwrap();
        for i in 0..6 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let f = |v: &[f64]| project(v).iter().zip(&up).map(|(p, u)| p * u).sum::<f64>();
            let numeric = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((analytic.data()[i] - numeric).abs() <= 1e-5, "coordinate {i}: {} vs {numeric}", analytic.data()[i]);
        }
        checked += 1;
    }
}

#[test]
fn rows_are_projected_independently() {
    let z: Tensor<f64> = Tensor::matrix(2, 3, vec![0.5, 0.1, -0.2, 2.0, 0.0, 0.0]).unwrap();
    let res = sparsemax_rows(&z, None).unwrap();
    assert_eq!(res.probs.row(1), &[1.0, 0.0, 0.0]);
    assert_eq!((res.support_size(0), res.support_size(1)), (2, 1));
    let mask = Mask::from_fn(2, 3, |r, c| r == 0 && c == 0);
    let masked = sparsemax_rows(&z, Some(&mask)).unwrap();
    assert_eq!(masked.probs.at(0, 0), 0.0);
    assert!((masked.probs.at(0, 1) - 0.65).abs() < 1e-12);
}

proptest! {
    #[test]
    fn order_is_preserved(z in prop::collection::vec(-5.0f64..5.0, 2..12)) {
        let p = project(&z);
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] >= z[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn agrees_with_oracle(z in prop::collection::vec(-3.0f64..3.0, 2..10)) {
        let oracle = simplex_projection_oracle(&z, 10_000);
        for (a, b) in project(&z).iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
