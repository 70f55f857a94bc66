//! Squash on many random vectors, plus proptest versions of its invariants.

use capsroute::autodiff::{Tape, Tensor};
use capsroute::capsule::squash;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn squash_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new([rows.len(), d], flat).unwrap());
    let v = squash(&mut tape, s).unwrap();
    tape.value(v).data().chunks(d).map(|c| c.to_vec()).collect()
}

#[test]
fn thousand_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let rows: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let d = 16;
            // magnitudes spread over several decades
            let scale = 10f64.powf(rng.random_range(-3.0..2.0));
            (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
        })
        .collect();
    let out = squash_rows(&rows);
    for (s, v) in rows.iter().zip(&out) {
        let n = norm(s);
        let want = n * n / (1.0 + n * n);
        assert!((norm(v) - want).abs() < 1e-9, "‖v‖ {} vs {want}", norm(v));
        // same direction: v = (‖v‖/‖s‖)·s
        for (a, b) in s.iter().zip(v) {
            assert!((b - a * norm(v) / n).abs() < 1e-9);
        }
        assert!(norm(v) < 1.0);
    }
}

#[test]
fn zero_maps_to_zero_with_finite_gradient() {
    let mut tape = Tape::new();
    let s = tape.param(Tensor::zeros([2, 8]));
    let v = squash(&mut tape, s).unwrap();
    assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    let total = tape.sum(v);
    let g = tape.backward(total).unwrap().get(s);
    assert!(g.all_finite());
}

#[test]
fn norm_is_monotone_in_input_norm() {
    let dir = [0.6, -0.8];
    let lens: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
    let rows: Vec<Vec<f64>> = lens.iter().map(|&l| dir.iter().map(|d| d * l).collect()).collect();
    let out = squash_rows(&rows);
    for w in out.windows(2) {
        assert!(norm(&w[1]) > norm(&w[0]));
    }
}

proptest! {
    #[test]
    fn squash_invariants(s in prop::collection::vec(-50.0f64..50.0, 1..24)) {
        let v = &squash_rows(std::slice::from_ref(&s))[0];
        let n = norm(&s);
        prop_assert!(norm(v) < 1.0);
        prop_assert!((norm(v) - n * n / (1.0 + n * n)).abs() < 1e-9);
        // never longer than the input
        prop_assert!(norm(v) <= n + 1e-12);
        for (a, b) in s.iter().zip(v) {
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn squash_commutes_with_sign_flip(s in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let out = squash_rows(&[s, neg]);
        for (a, b) in out[0].iter().zip(&out[1]) {
            prop_assert_eq!(*a, -*b);
        }
    }
}
