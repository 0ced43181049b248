use winfair_wasm::{compare, compare_methods, explore, explore_factorization, scatter};

#[test]
fn weighted_factorization_never_loses_to_plain_svd() {
    let e = explore(12, 6, 3, 2.0).unwrap();
    assert_eq!(e.importance.len(), 12);
    assert_eq!(e.rows.len(), 6);
    for r in &e.rows {
        assert!(r.weighted_svd_error <= r.plain_svd_error + 1e-9, "{r:?}");
        assert!((0.0..=1.0 + 1e-12).contains(&r.retained_energy));
    }
    let last = e.rows.last().unwrap();
    assert!(last.weighted_svd_error < 1e-8);
    assert!((last.retained_energy - 1.0).abs() < 1e-12);
    assert!(e.rows.windows(2).all(|w| w[1].weighted_svd_error <= w[0].weighted_svd_error + 1e-9));
}

#[test]
fn empty_head_is_rejected() {
    assert!(explore(0, 3, 0, 1.0).is_err());
    assert!(explore(3, 3, 0, f64::NAN).is_err());
}

#[test]
fn zero_skew_matches_plain_svd() {
    let e = explore(8, 5, 0, 0.0).unwrap();
    for r in &e.rows {
        assert!((r.weighted_svd_error - r.plain_svd_error).abs() < 1e-9);
    }
}

#[test]
fn comparison_covers_three_methods() {
    let c = compare(0.6, 0.6, 1, 1).unwrap();
    let labels: Vec<_> = c.methods.iter().map(|m| m.method).collect();
    assert_eq!(labels, ["TL", "F_SVD", "OURS"]);
    assert!(c.methods[1].params < c.methods[0].params);
    assert_eq!(c.methods[1].rank, Some(1));
    for m in &c.methods {
        assert!((0.0..=100.0).contains(&m.report.err_percent));
    }
}

#[test]
fn scatter_points_are_labelled_by_group() {
    let s = scatter(0.6, 2).unwrap();
    assert!(!s.points.is_empty());
    assert!(s.points.iter().all(|p| p[2] == 1.0 || p[2] == 2.0));
    assert!(!s.explained_variance.is_empty());
}

#[test]
fn exports_return_json_and_are_deterministic() {
    let a = explore_factorization(6, 4, 9, 1.0).unwrap();
    assert_eq!(a, explore_factorization(6, 4, 9, 1.0).unwrap());
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
    let b = compare_methods(0.5, 0.8, 4, 0).unwrap();
    assert_eq!(b, compare_methods(0.5, 0.8, 4, 0).unwrap());
}

