//! Integration checks for the dense linear algebra against naive oracles.

mod common;

use caproj::linalg::{sym_inv_sqrt, sym_inverse, Matrix};
use caproj::seed::stream_rng;
use common::*;
use proptest::prelude::*;

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = stream_rng(101, "linalg/matmul");
    for _ in 0..20 {
        let a = random_matrix(5, 3, 1.0, &mut rng);
        let b = random_matrix(3, 2, 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        let oracle = naive_matmul(&a, &b);
        assert!(max_abs_diff(&fast, &oracle) < 1e-12);
    }
}

#[test]
fn matmul_is_associative_within_tolerance() {
    let mut rng = stream_rng(102, "linalg/assoc");
    for _ in 0..20 {
        let a = random_matrix(4, 6, 1.0, &mut rng);
        let b = random_matrix(6, 5, 1.0, &mut rng);
        let c = random_matrix(5, 3, 1.0, &mut rng);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.frobenius_norm().max(1.0);
        assert!(frobenius_diff(&left, &right) <= 1e-10 * scale);
    }
}

#[test]
fn sym_inverse_matches_gauss_jordan_on_gram_matrices() {
    let mut rng = stream_rng(103, "linalg/syminv");
    for trial in 0..20 {
        let w = random_matrix(64, 4, 1.0 / 8.0, &mut rng);
        let gram = naive_matmul(&w.transpose(), &w);
        let fast = sym_inverse(&gram, 0.0).unwrap();
        let oracle = gauss_jordan_inverse(&gram);
        assert!(
            frobenius_diff(&fast, &oracle) < 1e-9,
            "trial {trial}: diff {}",
            frobenius_diff(&fast, &oracle)
        );
    }
}

#[test]
fn sym_inverse_times_input_is_identity() {
    let mut rng = stream_rng(104, "linalg/syminv-id");
    for _ in 0..50 {
        let w = random_matrix(32, 6, 1.0 / 5.0, &mut rng);
        let gram = naive_matmul(&w.transpose(), &w);
        let inv = sym_inverse(&gram, 0.0).unwrap();
        let product = inv.matmul(&gram).unwrap();
        assert!(frobenius_diff(&product, &Matrix::identity(6)) <= 1e-8);
    }
}

#[test]
fn sym_inv_sqrt_squares_to_the_inverse() {
    let mut rng = stream_rng(105, "linalg/invsqrt");
    for _ in 0..30 {
        // Random SPD 4x4 via A^T A + small ridge for conditioning.
        let a = random_matrix(4, 4, 1.0, &mut rng);
        let mut spd = naive_matmul(&a.transpose(), &a);
        for i in 0..4 {
            spd.set(i, i, spd.get(i, i) + 0.1);
        }
        let s = sym_inv_sqrt(&spd, 0.0).unwrap();
        let ss = s.matmul(&s).unwrap();
        let inv = sym_inverse(&spd, 0.0).unwrap();
        assert!(frobenius_diff(&ss, &inv) <= 1e-8);
        // S S G = I directly.
        let ssg = ss.matmul(&spd).unwrap();
        assert!(frobenius_diff(&ssg, &Matrix::identity(4)) <= 1e-8);
    }
}

#[test]
fn operations_are_bit_deterministic() {
    let mut rng = stream_rng(106, "linalg/det");
    let a = random_matrix(8, 8, 1.0, &mut rng);
    let spd = {
        let mut m = naive_matmul(&a.transpose(), &a);
        for i in 0..8 {
            m.set(i, i, m.get(i, i) + 0.5);
        }
        m
    };
    let x = sym_inverse(&spd, 0.0).unwrap();
    let y = sym_inverse(&spd, 0.0).unwrap();
    assert_eq!(x.as_slice(), y.as_slice());
    let s = sym_inv_sqrt(&spd, 0.0).unwrap();
    let t = sym_inv_sqrt(&spd, 0.0).unwrap();
    assert_eq!(s.as_slice(), t.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transpose_involution_holds(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = stream_rng(seed, "linalg/prop-transpose");
        let a = random_matrix(rows, cols, 1.0, &mut rng);
        let round_trip = a.transpose().transpose();
        prop_assert_eq!(round_trip.as_slice(), a.as_slice());
    }

    #[test]
    fn matvec_agrees_with_matmul_column(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = stream_rng(seed, "linalg/prop-matvec");
        let a = random_matrix(rows, cols, 1.0, &mut rng);
        let v = random_vector(cols, &mut rng);
        let col = Matrix::new(cols, 1, v.as_slice().to_vec()).unwrap();
        let via_matmul = a.matmul(&col).unwrap();
        let via_matvec = a.matvec(&v).unwrap();
        for i in 0..rows {
            prop_assert!((via_matmul.get(i, 0) - via_matvec.get(i)).abs() < 1e-12);
        }
    }
}
