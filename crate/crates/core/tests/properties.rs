use proptest::prelude::*;
use winfair::linalg::{matmul, scale_rows, svd, DiagonalMatrix, Matrix};
use winfair::lowrank::{cumulative_energy, weighted_factorize, RankPolicy};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
    })
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_sorts(m in matrix(9, 7)) {
        let s = svd(&m).unwrap();
        prop_assert!(max_abs_diff(&s.reconstruct(), &m) < 1e-8);
        prop_assert!(s.s.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        prop_assert!(s.s.iter().all(|&v| v >= 0.0));
        let utu = matmul(&s.u.transpose(), &s.u).unwrap();
        for i in 0..utu.rows() {
            for j in 0..utu.cols() {
                if s.s[i] > 1e-9 && s.s[j] > 1e-9 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((utu[(i, j)] - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn energy_is_monotone_and_ends_at_one(s in prop::collection::vec(0.0f64..10.0, 1..12)) {
        let e = cumulative_energy(&s);
        prop_assert!(e.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        prop_assert!((e.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_weighted_factorization_is_exact(
        (w, imp) in matrix(8, 5).prop_flat_map(|w| {
            let d = w.rows();
            (Just(w), prop::collection::vec(0.1f64..10.0, d))
        })
    ) {
        let k = w.cols();
        let imp = DiagonalMatrix::new(imp);
        let full = w.rows().min(k);
        let head = weighted_factorize(&w, &vec![0.0; k], &imp, RankPolicy::Fixed(full)).unwrap();
        prop_assert!(max_abs_diff(&head.product(), &w) < 1e-7);
    }

    #[test]
    fn weighted_rank_r_beats_plain_rank_r_in_weighted_norm(
        (w, imp, r) in matrix(8, 5).prop_flat_map(|w| {
            let d = w.rows();
            let p = d.min(w.cols());
            (Just(w), prop::collection::vec(0.1f64..10.0, d), 1..=p)
        })
    ) {
        let k = w.cols();
        let d = w.rows();
        let imp = DiagonalMatrix::new(imp);
        let zero = vec![0.0; k];
        let weighted = weighted_factorize(&w, &zero, &imp, RankPolicy::Fixed(r)).unwrap();
        let plain = weighted_factorize(&w, &zero, &DiagonalMatrix::identity(d), RankPolicy::Fixed(r)).unwrap();
        let err = |p: &Matrix| scale_rows(&imp, &w.sub(p).unwrap()).unwrap().frobenius_norm();
        prop_assert!(err(&weighted.product()) <= err(&plain.product()) + 1e-8);
    }
}
