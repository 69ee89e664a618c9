mod common;

use common::oracle::{self, AUC_TOL, LOSS_TOL};

#[test]
fn losses_match_scalar_loops() {
    for (name, worst) in oracle::loss_suite() {
        println!("{name:<13} worst |lib - oracle| {worst:.2e}");
        assert!(worst <= LOSS_TOL, "{name}: {worst}");
    }
}

#[test]
fn metrics_match_counting_and_pairwise_oracles() {
    let m = oracle::metric_suite();
    println!("{m:?}");
    assert_eq!(m.count_mismatches, 0);
    assert!(m.f1_worst <= AUC_TOL);
    assert!(m.auc_worst <= AUC_TOL);
    assert!(m.auc_binary_worst <= AUC_TOL);
}

#[test]
fn four_point_auc_example() {
    let auc = oracle::auc_oracle(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]);
    assert_eq!(auc, 0.75);
    assert_eq!(vitae_ssl::eval::auc_binary(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap(), 0.75);
}
