use tcn_core::gradcheck::{run_suite, GradCheckConfig, SUITE_OPS};

#[test]
fn every_op_matches_finite_differences_on_random_configs() {
    let cfg = GradCheckConfig::default();
    let checks = run_suite(100, 2024, &cfg).unwrap();
    assert_eq!(checks.len(), SUITE_OPS.len());
    for c in &checks {
        assert_eq!(c.configs, 100, "{}", c.name);
        assert!(c.report.checked > 0, "{} checked nothing", c.name);
        assert!(
            c.report.passed(&cfg),
            "{}: max relative error {:e}, worst {:?}",
            c.name,
            c.report.max_rel_error,
            c.report.worst
        );
    }
}
