//! Browser bindings for three small demonstrations: the response
//! transformation, cumulative incidence curves of the competing-risks
//! model, and a simulate-and-fit round trip with the goodness-of-fit
//! statistic.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cfsurv::cmprsk::cif_curve;
use cfsurv::dist::CovMatrix;
use cfsurv::estimator::{fit, FitConfig, Variant};
use cfsurv::gof::{fitted_controls, gof_statistic, kaplan_meier, ModelK, DEFAULT_NODES};
use cfsurv::quad::GaussLegendre;
use cfsurv::simkit::{cmprsk_default_truth, generate, DgpSpec, Scenario};
use cfsurv::transform::yj;

/// Λ_θ on `points` equally spaced values of [lo, hi].
pub fn transform_values(theta: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(0.0..=2.0).contains(&theta) {
        return Err("theta must lie in [0, 2]".into());
    }
    Ok(grid(lo, hi, points)?.into_iter().map(|t| yj(theta, t)).collect())
}

fn grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(lo < hi && lo.is_finite() && hi.is_finite()) || points < 2 {
        return Err("need lo < hi and at least two points".into());
    }
    let h = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + h * i as f64).collect())
}

/// Cumulative incidence of the two competing events of the built-in
/// three-risk design, with the given correlations, at covariate value 0,
/// treatment `z` and control value `v`. Returns the log-time grid followed
/// by the curves of causes 1 and 2.
pub fn cif_values(rho: [f64; 3], z: f64, v: f64, t_max: f64, points: usize) -> Result<Vec<f64>, String> {
    let mut params = cmprsk_default_truth();
    let sd: Vec<f64> = (0..3).map(|i| params.sigma.sd(i)).collect();
    params.sigma = CovMatrix::from_sd_corr(&sd, &rho).map_err(|e| e.to_string())?;
    let g = grid(-3.0, t_max, points)?;
    let mut out = g.clone();
    for cause in 1..=2 {
        out.extend(cif_curve(&params, cause, &g, &[1.0, 0.0], z, v).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct Estimate {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
}

/// Kaplan–Meier and fitted distribution of the follow-up time, with the
/// Cramér–von Mises statistic.
#[derive(Debug, Serialize)]
pub struct Demo {
    pub n: usize,
    pub counts: (usize, usize, usize),
    pub km_times: Vec<f64>,
    pub km_cdf: Vec<f64>,
    pub grid: Vec<f64>,
    pub model_cdf: Vec<f64>,
    pub t_cm: f64,
    pub estimates: Vec<Estimate>,
}

/// Simulates one data set of the chosen scenario and fits the two-step model.
pub fn simulate_and_fit_demo(n: usize, seed: u64, scenario: usize) -> Result<Demo, String> {
    let scenario = *Scenario::ALL.get(scenario).ok_or("unknown scenario")?;
    if !(100..=5000).contains(&n) {
        return Err("n must lie in 100..=5000".into());
    }
    let err = |e: cfsurv::Error| e.to_string();
    let spec = DgpSpec::new(scenario, n, seed);
    let sim = generate(&spec).map_err(err)?;
    let data = &sim.data;
    let fs = scenario.first_stage();
    let cfg = FitConfig {
        compute_vcov: false,
        multistart: 1,
        ..FitConfig::new(Variant::TwoStep)
    };
    let f = fit(data, &fs, &cfg).map_err(err)?;
    let v = fitted_controls(data, &fs, &f).map_err(err)?;
    let t_cm = gof_statistic(data, &v, &f.eta_hat, &GaussLegendre::new(DEFAULT_NODES)).map_err(err)?;
    let observed: Vec<bool> = (0..data.n()).map(|i| data.delta[i] || data.xi[i]).collect();
    let km = kaplan_meier(&data.y, &observed).map_err(err)?;
    let model = ModelK::new(&f.eta_hat, data, &v).map_err(err)?;
    let lo = km.times.first().copied().unwrap_or(0.0) - 0.5;
    let hi = km.times.last().copied().unwrap_or(1.0) + 0.5;
    let g = grid(lo, hi, 200)?;
    let model_cdf = g.iter().map(|&k| model.cdf(k)).collect();
    let truth = spec.truth.to_vec();
    let estimates = f
        .names
        .iter()
        .zip(f.eta_hat.to_vec())
        .zip(truth)
        .map(|((name, estimate), truth)| Estimate {
            name: name.clone(),
            truth,
            estimate,
        })
        .collect();
    Ok(Demo {
        n,
        counts: data.outcome_counts(),
        km_cdf: km.surv.iter().map(|s| 1.0 - s).collect(),
        km_times: km.times,
        grid: g,
        model_cdf,
        t_cm,
        estimates,
    })
}

#[wasm_bindgen]
pub fn transform_curve(theta: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, JsError> {
    transform_values(theta, lo, hi, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn cif_curves(
    rho12: f64,
    rho13: f64,
    rho23: f64,
    z: f64,
    v: f64,
    t_max: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    cif_values([rho12, rho13, rho23], z, v, t_max, points).map_err(|e| JsError::new(&e))
}

/// JSON-encoded [`Demo`].
#[wasm_bindgen]
pub fn simulate_and_fit(n: usize, seed: u32, scenario: usize) -> Result<String, JsError> {
    let demo = simulate_and_fit_demo(n, seed as u64, scenario).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&demo).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn scenario_labels() -> Vec<String> {
    Scenario::ALL.iter().map(|s| s.label().to_string()).collect()
}
