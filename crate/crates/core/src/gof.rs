//! Goodness-of-fit test based on the distribution of K = min(T, C).
//!
//! The statistic compares the model-implied cdf of K with the Kaplan–Meier
//! estimate that treats administrative censoring as the only censoring. Its
//! null distribution is approximated by a parametric bootstrap. The test is
//! one-sided and slightly conservative: a rejection is evidence of a bad
//! fit, a non-rejection does not establish a good one.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::rng;
use crate::dist::{norm_pdf, norm_sf, Bvn};
use crate::error::{Error, Result};
use crate::estimator::{fit_warm, FitConfig, FitResult, Variant, WarmStart};
use crate::firststage::FirstStageSpec;
use crate::likelihood::{EtaParams, RHO_BOUND};
use crate::quad::GaussLegendre;
use crate::simkit::with_pool;
use crate::transform::{yj, yj_deriv, yj_inv};

/// Product-limit estimate of a survival function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct observed times (events or censorings), ascending.
    pub times: Vec<f64>,
    /// Survival just after each time.
    pub surv: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// S(k) = P(X > k).
    pub fn surv_at(&self, k: f64) -> f64 {
        let idx = self.times.partition_point(|&t| t <= k);
        if idx == 0 {
            1.0
        } else {
            self.surv[idx - 1]
        }
    }

    /// F(k) = 1 − S(k).
    pub fn cdf_at(&self, k: f64) -> f64 {
        1.0 - self.surv_at(k)
    }

    /// Largest value reached by the cdf.
    pub fn max_cdf(&self) -> f64 {
        1.0 - self.surv.last().copied().unwrap_or(1.0)
    }

    /// Generalized inverse inf{k : F(k) ≥ u}; +∞ when u exceeds the largest
    /// value of F.
    pub fn quantile(&self, u: f64) -> f64 {
        let idx = self.surv.partition_point(|&s| 1.0 - s < u);
        self.times.get(idx).copied().unwrap_or(f64::INFINITY)
    }
}

/// Kaplan–Meier estimator; ties are grouped, and events precede censorings
/// at a common time.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::Domain("Kaplan–Meier needs at least one observation".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Input("times and event flags differ in length".into()));
    }
    if times.iter().any(|t| t.is_nan()) {
        return Err(Error::Domain("NaN time".into()));
    }
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut km = KmCurve {
        times: vec![],
        surv: vec![],
        at_risk: vec![],
        events: vec![],
    };
    let mut s = 1.0;
    let mut risk = times.len();
    let mut i = 0;
    while i < idx.len() {
        let t = times[idx[i]];
        let mut d = 0;
        let mut m = 0;
        while i < idx.len() && times[idx[i]] == t {
            d += events[idx[i]] as usize;
            m += 1;
            i += 1;
        }
        s *= 1.0 - d as f64 / risk as f64;
        km.times.push(t);
        km.surv.push(s);
        km.at_risk.push(risk);
        km.events.push(d);
        risk -= m;
    }
    Ok(km)
}

/// Model-implied distribution of K = min(T, C), averaged over covariate rows.
pub struct ModelK {
    eta: EtaParams,
    tau_t: Vec<f64>,
    tau_c: Vec<f64>,
    bvn: Bvn,
}

/// Standardized arguments beyond this are treated as ±∞.
const FAR: f64 = 8.5;
const DENS_FAR: f64 = 9.0;

impl ModelK {
    pub fn new(eta: &EtaParams, data: &Dataset, v: &[f64]) -> Result<Self> {
        if v.len() != data.n() || eta.p() != data.p_x() {
            return Err(Error::Input("model and data dimensions differ".into()));
        }
        let (tau_t, tau_c) = (0..data.n())
            .map(|i| eta.location(data.x_row(i), data.z[i], v[i]))
            .unzip();
        Ok(ModelK {
            eta: eta.clone(),
            tau_t,
            tau_c,
            bvn: Bvn::with_rho(eta.rho.value().clamp(-RHO_BOUND, RHO_BOUND)),
        })
    }

    /// (F̂_K(k), f̂_K(k)).
    pub fn cdf_pdf(&self, k: f64) -> (f64, f64) {
        let e = &self.eta;
        let (t1, t2) = (e.theta1.value(), e.theta2.value());
        let (lt, lc) = (yj(t1, k), yj(t2, k));
        let r = self.bvn.rho();
        let s = ((1.0 - r) * (1.0 + r)).sqrt();
        let mut tail = 0.0;
        let (mut dt, mut dc) = (0.0, 0.0);
        for i in 0..self.tau_t.len() {
            let a = (lt - self.tau_t[i]) / e.sigma_t;
            let b = (lc - self.tau_c[i]) / e.sigma_c;
            tail += if a > FAR || b > FAR {
                0.0
            } else if a < -FAR && b < -FAR {
                1.0
            } else if a < -FAR {
                norm_sf(b)
            } else if b < -FAR {
                norm_sf(a)
            } else {
                self.bvn.tail(a, b)
            };
            if a.abs() < DENS_FAR {
                dt += norm_pdf(a) * norm_sf((b - r * a) / s);
            }
            if b.abs() < DENS_FAR {
                dc += norm_pdf(b) * norm_sf((a - r * b) / s);
            }
        }
        let n = self.tau_t.len() as f64;
        let dens = yj_deriv(t1, k) / e.sigma_t * dt + yj_deriv(t2, k) / e.sigma_c * dc;
        (1.0 - tail / n, dens / n)
    }

    pub fn cdf(&self, k: f64) -> f64 {
        self.cdf_pdf(k).0
    }
}

/// Integration range [min y − 3% range, max y + 3% range].
pub fn statistic_range(y: &[f64]) -> (f64, f64) {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.03 * (hi - lo).max(1e-8);
    (lo - pad, hi + pad)
}

/// n ∫ (F̂_K − F̂_{K,n})² w dF̂_K by Gauss–Legendre quadrature on [lo, hi].
pub fn cvm_statistic<W: Fn(f64) -> f64>(
    model: &ModelK,
    km: &KmCurve,
    n: usize,
    range: (f64, f64),
    rule: &GaussLegendre,
    weight: W,
) -> f64 {
    let (xs, ws) = rule.on_interval(range.0, range.1);
    let s: f64 = xs
        .iter()
        .zip(&ws)
        .map(|(&k, &w)| {
            let (f, d) = model.cdf_pdf(k);
            let diff = f - km.cdf_at(k);
            w * diff * diff * weight(k) * d
        })
        .sum();
    n as f64 * s
}

pub const DEFAULT_NODES: usize = 512;

/// T_CM for a fitted model with unit weight.
pub fn gof_statistic(data: &Dataset, v: &[f64], eta: &EtaParams, rule: &GaussLegendre) -> Result<f64> {
    let model = ModelK::new(eta, data, v)?;
    let ev: Vec<bool> = (0..data.n()).map(|i| data.delta[i] || data.xi[i]).collect();
    let km = kaplan_meier(&data.y, &ev)?;
    Ok(cvm_statistic(
        &model,
        &km,
        data.n(),
        statistic_range(&data.y),
        rule,
        |_| 1.0,
    ))
}

/// Control values implied by a fit.
pub fn fitted_controls(data: &Dataset, first_stage: &FirstStageSpec, fit: &FitResult) -> Result<Vec<f64>> {
    match fit.variant {
        Variant::TwoStep | Variant::Independent => first_stage.control_values(data, &fit.gamma_hat),
        Variant::Oracle => data
            .control
            .clone()
            .ok_or_else(|| Error::Input("oracle fit without a control column".into())),
        Variant::Naive => Ok(vec![0.0; data.n()]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofConfig {
    pub bootstrap: usize,
    pub seed: u64,
    pub threads: usize,
    pub levels: Vec<f64>,
    pub nodes: usize,
}

impl Default for GofConfig {
    fn default() -> Self {
        GofConfig {
            bootstrap: 250,
            seed: 1,
            threads: 0,
            levels: vec![0.01, 0.05, 0.10],
            nodes: DEFAULT_NODES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub t_cm: f64,
    /// Statistics of the successful bootstrap samples, in draw order.
    pub boot_stats: Vec<f64>,
    pub p_value: f64,
    /// (κ, reject at level κ).
    pub reject_at: Vec<(f64, bool)>,
    pub failures: usize,
}

impl GofResult {
    pub fn from_stats(t_cm: f64, boot_stats: Vec<f64>, levels: &[f64], failures: usize) -> Self {
        let b = boot_stats.len();
        let exceed = boot_stats.iter().filter(|&&s| s >= t_cm).count();
        let mut sorted = boot_stats.clone();
        sorted.sort_by(f64::total_cmp);
        let reject_at = levels
            .iter()
            .map(|&k| {
                let pos = (((1.0 - k) * b as f64).ceil() as usize).clamp(1, b) - 1;
                (k, t_cm > sorted[pos])
            })
            .collect();
        GofResult {
            t_cm,
            p_value: (1 + exceed) as f64 / (b + 1) as f64,
            boot_stats,
            reject_at,
            failures,
        }
    }

    pub fn rejects(&self, level: f64) -> Option<bool> {
        self.reject_at
            .iter()
            .find(|(k, _)| (k - level).abs() < 1e-12)
            .map(|r| r.1)
    }
}

/// Parametric bootstrap test of the fitted model.
pub fn bootstrap_gof(
    data: &Dataset,
    first_stage: &FirstStageSpec,
    fit: &FitResult,
    cfg: &GofConfig,
) -> Result<GofResult> {
    if cfg.bootstrap < 100 {
        return Err(Error::Input("the bootstrap test needs B ≥ 100".into()));
    }
    if !fit.converged {
        return Err(Error::Input("the fit did not converge".into()));
    }
    if cfg.levels.iter().any(|k| !(*k > 0.0 && *k < 1.0)) {
        return Err(Error::Input("levels must lie in (0, 1)".into()));
    }
    let rule = GaussLegendre::new(cfg.nodes);
    let v = fitted_controls(data, first_stage, fit)?;
    let eta = &fit.eta_hat;
    let t_cm = gof_statistic(data, &v, eta, &rule)?;

    let admin: Vec<bool> = (0..data.n()).map(|i| !data.delta[i] && !data.xi[i]).collect();
    let g_admin = kaplan_meier(&data.y, &admin)?;
    let refit_cfg = FitConfig {
        variant: fit.variant,
        theta_mode: fit.theta_mode,
        multistart: 1,
        compute_vcov: false,
        ..FitConfig::default()
    };
    let warm = WarmStart::new(data, first_stage, &refit_cfg, eta)?;
    let locs: Vec<(f64, f64)> = (0..data.n())
        .map(|i| eta.location(data.x_row(i), data.z[i], v[i]))
        .collect();
    let one = |b: usize| -> Result<f64> {
        let mut r = rng::stream(cfg.seed, &[b as u64]);
        let rho = eta.rho.value();
        let mut y = Vec::with_capacity(data.n());
        let mut delta = Vec::with_capacity(data.n());
        let mut xi = Vec::with_capacity(data.n());
        for &(tt, tc) in &locs {
            let (et, ec) = rng::bivariate_normal(&mut r, eta.sigma_t, eta.sigma_c, rho);
            let t = yj_inv(eta.theta1.value(), tt + et);
            let c = yj_inv(eta.theta2.value(), tc + ec);
            let a = g_admin.quantile(r.random::<f64>());
            y.push(t.min(c).min(a));
            delta.push(t <= c && t <= a);
            xi.push(c < t && c <= a);
        }
        let boot = data.with_outcomes(y, delta, xi)?;
        let refit = fit_warm(&boot, first_stage, &refit_cfg, &warm)?;
        let vb = fitted_controls(&boot, first_stage, &refit)?;
        gof_statistic(&boot, &vb, &refit.eta_hat, &rule)
    };
    let outcomes: Vec<Result<f64>> = with_pool(cfg.threads, || (0..cfg.bootstrap).into_par_iter().map(one).collect())?;
    let mut stats = Vec::with_capacity(cfg.bootstrap);
    let mut failures = 0;
    for o in outcomes {
        match o {
            Ok(s) if s.is_finite() => stats.push(s),
            _ => failures += 1,
        }
    }
    if failures * 10 > cfg.bootstrap {
        return Err(Error::Test(format!(
            "{failures} of {} bootstrap refits failed",
            cfg.bootstrap
        )));
    }
    Ok(GofResult::from_stats(t_cm, stats, &cfg.levels, failures))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn km_small_cases() {
        let km = kaplan_meier(&[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert!((km.cdf_at(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((km.cdf_at(2.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.cdf_at(3.0), 1.0);
        assert_eq!(km.cdf_at(0.5), 0.0);
        let km = kaplan_meier(&[1.0, 2.0, 3.0], &[false; 3]).unwrap();
        assert!(km.times.iter().all(|&t| km.cdf_at(t) == 0.0));
        let km = kaplan_meier(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        assert!((km.cdf_at(2.5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.surv_at(3.0), 0.0);
        assert!(kaplan_meier(&[], &[]).is_err());
    }

    #[test]
    fn km_ties_and_quantile() {
        let km = kaplan_meier(&[2.0, 1.0, 2.0, 2.0, 5.0], &[true, true, false, true, false]).unwrap();
        assert_eq!(km.times, vec![1.0, 2.0, 5.0]);
        assert_eq!(km.at_risk, vec![5, 4, 1]);
        assert_eq!(km.events, vec![1, 2, 0]);
        assert!((km.surv_at(2.0) - 0.8 * 0.5).abs() < 1e-15);
        assert_eq!(km.quantile(0.1), 1.0);
        assert_eq!(km.quantile(0.19), 1.0);
        assert_eq!(km.quantile(0.5), 2.0);
        assert_eq!(km.quantile(0.7), f64::INFINITY);
    }

    #[test]
    fn km_without_censoring_is_the_ecdf() {
        let mut r = rng::stream(1, &[]);
        let xs: Vec<f64> = (0..300).map(|_| rng::normal(&mut r, 0.0, 1.0)).collect();
        let km = kaplan_meier(&xs, &vec![true; 300]).unwrap();
        for &k in &[-1.5, -0.2, 0.0, 0.7, 2.0] {
            let ecdf = xs.iter().filter(|&&x| x <= k).count() as f64 / 300.0;
            assert!((km.cdf_at(k) - ecdf).abs() < 1e-12);
        }
    }

    #[test]
    fn p_value_and_rejection_rule() {
        let boot: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let g = GofResult::from_stats(95.5, boot.clone(), &[0.05, 0.10], 0);
        assert!((g.p_value - 6.0 / 101.0).abs() < 1e-15);
        assert_eq!(g.rejects(0.05), Some(true));
        assert_eq!(g.rejects(0.10), Some(true));
        let g = GofResult::from_stats(95.0, boot.clone(), &[0.05], 0);
        assert_eq!(g.rejects(0.05), Some(false));
        let g = GofResult::from_stats(1000.0, boot, &[0.05], 0);
        assert!((g.p_value - 1.0 / 101.0).abs() < 1e-15);
    }
}
