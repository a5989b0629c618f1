use cfsurv::estimator::{fit, FitConfig, Variant};
use cfsurv::gof::{bootstrap_gof, fitted_controls, gof_statistic, GofConfig, DEFAULT_NODES};
use cfsurv::quad::GaussLegendre;
use cfsurv::simkit::{generate, DgpSpec, Scenario};

#[test]
fn bootstrap_is_thread_independent_and_well_formed() {
    let sim = generate(&DgpSpec::baseline(500, 9)).unwrap();
    let fs = Scenario::Baseline.first_stage();
    let f = fit(&sim.data, &fs, &FitConfig::new(Variant::TwoStep)).unwrap();
    let cfg = GofConfig {
        bootstrap: 100,
        seed: 42,
        threads: 1,
        ..Default::default()
    };
    let one = bootstrap_gof(&sim.data, &fs, &f, &cfg).unwrap();
    let two = bootstrap_gof(
        &sim.data,
        &fs,
        &f,
        &GofConfig {
            threads: 2,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_eq!(one, two);
    assert_eq!(one.boot_stats.len() + one.failures, 100);
    assert!(one.p_value > 0.0 && one.p_value <= 1.0);
    assert!(one.boot_stats.iter().all(|s| s.is_finite() && *s >= 0.0));

    let v = fitted_controls(&sim.data, &fs, &f).unwrap();
    let t = gof_statistic(&sim.data, &v, &f.eta_hat, &GaussLegendre::new(DEFAULT_NODES)).unwrap();
    assert_eq!(t, one.t_cm);

    let small = GofConfig { bootstrap: 99, ..cfg };
    assert!(matches!(
        bootstrap_gof(&sim.data, &fs, &f, &small),
        Err(cfsurv::Error::Input(_))
    ));
}
