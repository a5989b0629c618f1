use cfsurv::dist::Corr;
use cfsurv::estimator::{confidence_intervals, fit, sandwich_vcov, FitConfig, FitResult, Variant};
use cfsurv::firststage::fit_first_stage;
use cfsurv::likelihood::{EtaParams, LikelihoodEvaluator};
use cfsurv::optim::fd_gradient;
use cfsurv::simkit::{default_truth, generate, DgpSpec, Scenario, Simulated};
use nalgebra::DMatrix;

fn baseline(n: usize, seed: u64) -> Simulated {
    generate(&DgpSpec::baseline(n, seed)).unwrap()
}

fn fit_variant(sim: &Simulated, variant: Variant) -> FitResult {
    let data = if variant == Variant::Oracle {
        sim.oracle_data()
    } else {
        sim.data.clone()
    };
    fit(&data, &Scenario::Baseline.first_stage(), &FitConfig::new(variant)).unwrap()
}

#[test]
fn gradient_matches_richardson_extrapolation() {
    let sim = baseline(800, 3);
    let ev = LikelihoodEvaluator::new(&sim.data, &sim.latent.v).unwrap();
    let mut x = default_truth().to_vec();
    x[0] += 0.2;
    x[9] -= 0.1;
    let p = default_truth().p();
    let f = |v: &[f64]| ev.mean(&EtaParams::from_vec(v, p).unwrap());
    let g = fd_gradient(&f, &x, 1e-6);
    for i in 0..x.len() {
        let central = |h: f64| {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        };
        let h = 1e-3;
        let rich = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        assert!(
            (g[i] - rich).abs() <= 1e-4 * rich.abs().max(1.0),
            "component {i}: {} vs {rich}",
            g[i]
        );
    }
}

#[test]
fn fits_are_reproducible() {
    let sim = baseline(600, 11);
    let a = fit_variant(&sim, Variant::TwoStep);
    let b = fit_variant(&sim, Variant::TwoStep);
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn two_step_fit_invariants() {
    let sim = baseline(1000, 5);
    let r = fit_variant(&sim, Variant::TwoStep);
    assert!(r.converged);
    let vcov = r.vcov_matrix().expect("vcov");
    assert_eq!(vcov.nrows(), r.free.len());
    assert!((&vcov - vcov.transpose()).amax() < 1e-14);
    let min_eig = vcov.clone().symmetric_eigenvalues().min();
    assert!(min_eig >= -1e-10 * vcov.trace());
    for e in r.estimates.iter().filter(|e| e.free) {
        let (lo, hi) = e.ci.unwrap();
        assert!(lo < e.estimate && e.estimate < hi, "{}", e.name);
        if e.name.starts_with("sigma") {
            assert!(lo > 0.0);
        }
        if e.name == "rho" {
            assert!(-1.0 < lo && hi < 1.0);
        }
    }
    for s in &r.starts {
        assert!(r.loglik >= s.initial_loglik);
    }
    assert_eq!(r.starts.len(), FitConfig::default().multistart);
    let theta = r.estimate("theta1").unwrap();
    assert_eq!(theta.null_value, 1.0);
}

#[test]
fn argmax_is_invariant_to_covariate_scale() {
    let sim = baseline(1000, 8);
    let fs = Scenario::Baseline.first_stage();
    let cfg = FitConfig {
        compute_vcov: false,
        ..FitConfig::new(Variant::TwoStep)
    };
    let a = fit(&sim.data, &fs, &cfg).unwrap();
    let mut scaled = sim.data.clone();
    scaled.scale_covariate(0, 10.0);
    let b = fit(&scaled, &fs, &cfg).unwrap();
    let p = a.eta_hat.p();
    let mut ea = a.eta_hat.to_vec();
    let eb = b.eta_hat.to_vec();
    // the coefficient of X̃ shrinks by the scale factor in both equations
    for i in [1, p + 2 + 1] {
        ea[i] /= 10.0;
    }
    for (i, (x, y)) in ea.iter().zip(&eb).enumerate() {
        assert!((x - y).abs() < 1e-4, "component {i}: {x} vs {y}");
    }
}

#[test]
fn degenerate_first_stage_correction_vanishes() {
    let sim = baseline(700, 2);
    let fs_spec = Scenario::Baseline.first_stage();
    let r = fit_variant(&sim, Variant::TwoStep);
    let mut fs = fit_first_stage(&sim.data, &fs_spec).unwrap();
    fs.score_rows.fill(0.0);
    let cfg = FitConfig::default();
    let with = sandwich_vcov(&sim.data, &fs.v_hat, &r.eta_hat, &r.free, Some(&fs), &cfg).unwrap();
    let without = sandwich_vcov(&sim.data, &fs.v_hat, &r.eta_hat, &r.free, None, &cfg).unwrap();
    assert!((&with - &without).amax() <= 1e-10 * without.amax());
    let full = r.vcov_matrix().unwrap();
    assert!((&full - &without).amax() > 1e-6 * without.amax());
}

#[test]
fn oracle_vcov_skips_the_correction() {
    let sim = baseline(600, 4);
    let r = fit_variant(&sim, Variant::Oracle);
    let direct = sandwich_vcov(
        &sim.data,
        &sim.latent.v,
        &r.eta_hat,
        &r.free,
        None,
        &FitConfig::default(),
    )
    .unwrap();
    assert_eq!(r.vcov_matrix().unwrap(), direct);
}

fn eta_with(sigma_t: f64, rho: f64) -> EtaParams {
    EtaParams {
        sigma_t,
        rho: Corr::new(rho).unwrap(),
        ..default_truth()
    }
}

#[test]
fn delta_method_interval_for_sigma() {
    let eta = eta_with(2.0, 0.0);
    let names = EtaParams::names(&["x1".to_string()]);
    let free: Vec<usize> = (0..names.len()).collect();
    let mut vcov = DMatrix::identity(free.len(), free.len()) * 0.01;
    let i_sigma = names.iter().position(|n| n == "sigma_T").unwrap();
    vcov[(i_sigma, i_sigma)] = 0.04;
    let est = confidence_intervals(&eta, &names, &free, Some(&vcov), 0.95);
    let (lo, hi) = est[i_sigma].ci.unwrap();
    assert!((lo - (2f64.ln() - 1.959964 * 0.1).exp()).abs() < 1e-6);
    assert!((hi - (2f64.ln() + 1.959964 * 0.1).exp()).abs() < 1e-6);
    assert!((lo - 1.644).abs() < 1e-3 && (hi - 2.433).abs() < 1e-3);

    let i_rho = names.iter().position(|n| n == "rho").unwrap();
    let (lo, hi) = est[i_rho].ci.unwrap();
    assert!(lo > -1.0 && hi < 1.0);
    assert!((lo + hi).abs() < 1e-15);
}

#[test]
fn rho_zero_data_gives_small_rho_hat() {
    let spec = DgpSpec {
        truth: eta_with(1.0, 0.0),
        ..DgpSpec::baseline(10_000, 21)
    };
    let sim = generate(&spec).unwrap();
    let fs = Scenario::Baseline.first_stage();
    let cfg = FitConfig {
        compute_vcov: false,
        ..FitConfig::new(Variant::TwoStep)
    };
    let two = fit(&sim.data, &fs, &cfg).unwrap();
    assert!(
        two.eta_hat.rho.value().abs() < 0.1,
        "rho hat {}",
        two.eta_hat.rho.value()
    );
    let ind = fit(
        &sim.data,
        &fs,
        &FitConfig {
            variant: Variant::Independent,
            ..cfg
        },
    )
    .unwrap();
    assert!((two.eta_hat.alpha_t - ind.eta_hat.alpha_t).abs() < 0.1);
}

#[test]
fn naive_treatment_effect_is_biased() {
    let sim = baseline(1000, 13);
    let naive = fit_variant(&sim, Variant::Naive);
    let two = fit_variant(&sim, Variant::TwoStep);
    let truth = default_truth().alpha_t;
    let se = two.se("alpha_T").unwrap();
    assert!((two.eta_hat.alpha_t - truth).abs() < 4.0 * se);
    assert!(naive.eta_hat.alpha_t - truth < -5.0 * naive.se("alpha_T").unwrap());
    assert_eq!(naive.eta_hat.lambda_t, 0.0);
}
