use cfsurv_wasm::{cif_values, scenario_labels, simulate_and_fit_demo, transform_values};

#[test]
fn transform_curve_is_increasing_and_checks_theta() {
    let v = transform_values(0.5, -3.0, 3.0, 61).unwrap();
    assert_eq!(v.len(), 61);
    assert!(v.windows(2).all(|w| w[0] < w[1]));
    let id = transform_values(1.0, -2.0, 2.0, 5).unwrap();
    for (a, b) in id.iter().zip([-2.0, -1.0, 0.0, 1.0, 2.0]) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(transform_values(2.5, 0.0, 1.0, 5).is_err());
    assert!(transform_values(1.0, 1.0, 0.0, 5).is_err());
}

#[test]
fn cif_curves_are_bounded_and_monotone() {
    let out = cif_values([0.3, 0.5, 0.2], 1.0, 0.0, 4.0, 40).unwrap();
    assert_eq!(out.len(), 120);
    let (c1, c2) = (&out[40..80], &out[80..]);
    for c in [c1, c2] {
        assert!(c.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(c1[39] + c2[39] <= 1.0);
    assert!(cif_values([0.99, 0.99, -0.99], 1.0, 0.0, 4.0, 40).is_err());
}

#[test]
fn simulate_and_fit_round_trip() {
    let d = simulate_and_fit_demo(600, 4, 0).unwrap();
    assert_eq!(d.counts.0 + d.counts.1 + d.counts.2, 600);
    assert!(d.t_cm >= 0.0 && d.t_cm < 1.0);
    assert!(d.model_cdf.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    assert_eq!(d.km_times.len(), d.km_cdf.len());
    let alpha = d.estimates.iter().find(|e| e.name == "alpha_T").unwrap();
    assert!((alpha.estimate - alpha.truth).abs() < 1.5);
    assert_eq!(scenario_labels().len(), 6);
    assert!(simulate_and_fit_demo(50, 1, 0).is_err());
    assert!(simulate_and_fit_demo(500, 1, 9).is_err());
}
