use sv2p_core::autodiff::gradcheck::GradCheckOptions;
use sv2p_core::netcheck::{network_grad_check, toy_config};

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let report = network_grad_check(11, 1e-4, &GradCheckOptions::default()).unwrap();
    let worst = report.max_rel_error();
    assert!(report.passed(), "max relative error {worst:e}");
    assert!(worst <= 1e-4);
}

#[test]
fn toy_config_is_the_small_case() {
    let cfg = toy_config();
    assert_eq!(cfg.resolution, 8);
    assert_eq!(cfg.masks, 2);
    assert_eq!(cfg.enc_channels.len(), 1);
}

#[test]
fn doubled_gradient_fails_the_network_check() {
    let opts = GradCheckOptions {
        corrupt_analytic: Some(2.0),
        max_coords: Some(20),
        ..GradCheckOptions::default()
    };
    let report = network_grad_check(11, 1e-4, &opts).unwrap();
    assert!(!report.passed());
    assert!((report.max_rel_error() - 1.0).abs() < 0.05, "{}", report.max_rel_error());
}
