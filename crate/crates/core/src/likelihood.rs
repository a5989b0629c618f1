//! Log-likelihood of the transformed bivariate (T, C) model.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObservedRecord};
use crate::dist::{norm_log_pdf, norm_log_sf, Bvn, Corr};
use crate::error::{Error, Result};
use crate::transform::{yj, yj_log_deriv, Theta};

/// Largest |ρ| used inside evaluations.
pub const RHO_BOUND: f64 = 1.0 - 1e-6;
pub(crate) const LOG_FLOOR: f64 = 1e-300;

/// Structural parameters η of the two transformed regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaParams {
    pub beta_t: Vec<f64>,
    pub alpha_t: f64,
    pub lambda_t: f64,
    pub beta_c: Vec<f64>,
    pub alpha_c: f64,
    pub lambda_c: f64,
    pub sigma_t: f64,
    pub sigma_c: f64,
    pub rho: Corr,
    pub theta1: Theta,
    pub theta2: Theta,
}

impl EtaParams {
    /// Number of entries in the flat vector for `p` covariate columns
    /// (intercept included).
    pub fn len_for(p: usize) -> usize {
        2 * (p + 2) + 5
    }

    pub fn p(&self) -> usize {
        self.beta_t.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_t.len() != self.beta_c.len() || self.beta_t.is_empty() {
            return Err(Error::Input("beta_T and beta_C must have equal non-zero length".into()));
        }
        if !(self.sigma_t > 0.0 && self.sigma_c > 0.0) {
            return Err(Error::Domain("sigma_T and sigma_C must be positive".into()));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameters must be finite".into()));
        }
        Ok(())
    }

    /// Flat layout: β_T, α_T, λ_T, β_C, α_C, λ_C, σ_T, σ_C, ρ, θ1, θ2.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::len_for(self.p()));
        v.extend_from_slice(&self.beta_t);
        v.extend([self.alpha_t, self.lambda_t]);
        v.extend_from_slice(&self.beta_c);
        v.extend([self.alpha_c, self.lambda_c]);
        v.extend([
            self.sigma_t,
            self.sigma_c,
            self.rho.value(),
            self.theta1.value(),
            self.theta2.value(),
        ]);
        v
    }

    pub fn from_vec(v: &[f64], p: usize) -> Result<Self> {
        if v.len() != Self::len_for(p) {
            return Err(Error::Input(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                Self::len_for(p)
            )));
        }
        let c = p + 2;
        let tail = &v[2 * c..];
        let eta = EtaParams {
            beta_t: v[..p].to_vec(),
            alpha_t: v[p],
            lambda_t: v[p + 1],
            beta_c: v[c..c + p].to_vec(),
            alpha_c: v[c + p],
            lambda_c: v[c + p + 1],
            sigma_t: tail[0],
            sigma_c: tail[1],
            rho: Corr::new(tail[2])?,
            theta1: Theta::new(tail[3])?,
            theta2: Theta::new(tail[4])?,
        };
        eta.validate()?;
        Ok(eta)
    }

    /// Parameter labels in flat order.
    pub fn names(covariates: &[String]) -> Vec<String> {
        let block = |s: &str| {
            let mut v = vec![format!("beta_{s}0")];
            v.extend(covariates.iter().map(|c| format!("beta_{s}_{c}")));
            v.push(format!("alpha_{s}"));
            v.push(format!("lambda_{s}"));
            v
        };
        let mut names = block("T");
        names.extend(block("C"));
        names.extend(["sigma_T", "sigma_C", "rho", "theta1", "theta2"].map(String::from));
        names
    }

    /// Exchanges the roles of T and C.
    pub fn swapped(&self) -> Self {
        EtaParams {
            beta_t: self.beta_c.clone(),
            alpha_t: self.alpha_c,
            lambda_t: self.lambda_c,
            beta_c: self.beta_t.clone(),
            alpha_c: self.alpha_t,
            lambda_c: self.lambda_t,
            sigma_t: self.sigma_c,
            sigma_c: self.sigma_t,
            rho: self.rho,
            theta1: self.theta2,
            theta2: self.theta1,
        }
    }

    /// (τ_T, τ_C) for covariates x = (1, X̃), treatment z and control value v.
    pub fn location(&self, x: &[f64], z: f64, v: f64) -> (f64, f64) {
        let tau_t = dot(&self.beta_t, x) + z * self.alpha_t + v * self.lambda_t;
        let tau_c = dot(&self.beta_c, x) + z * self.alpha_c + v * self.lambda_c;
        (tau_t, tau_c)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns (τ_T, τ_C, b_T, b_C).
pub fn linear_predictors(eta: &EtaParams, rec: &ObservedRecord) -> (f64, f64, f64, f64) {
    let (tau_t, tau_c) = eta.location(rec.x, rec.z, rec.v);
    let b_t = yj(eta.theta1.value(), rec.y) - tau_t;
    let b_c = yj(eta.theta2.value(), rec.y) - tau_c;
    (tau_t, tau_c, b_t, b_c)
}

/// Law of the administrative censoring time, used only when its factors
/// are requested explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AdminLaw {
    Uniform { lo: f64, hi: f64 },
}

impl AdminLaw {
    pub fn sf(&self, y: f64) -> f64 {
        match *self {
            AdminLaw::Uniform { lo, hi } => ((hi - y) / (hi - lo)).clamp(0.0, 1.0),
        }
    }

    pub fn pdf(&self, y: f64) -> f64 {
        match *self {
            AdminLaw::Uniform { lo, hi } => {
                if (lo..=hi).contains(&y) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub(crate) fn safe_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// ρ-dependent constants shared by all records.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    sigma_t: f64,
    sigma_c: f64,
    rho: f64,
    sqrt_1mr2: f64,
    ln_sigma_t: f64,
    ln_sigma_c: f64,
    bvn: Bvn,
}

impl Kernel {
    pub(crate) fn new(eta: &EtaParams) -> Self {
        let rho = eta.rho.value().clamp(-RHO_BOUND, RHO_BOUND);
        Kernel {
            sigma_t: eta.sigma_t,
            sigma_c: eta.sigma_c,
            rho,
            sqrt_1mr2: ((1.0 - rho) * (1.0 + rho)).sqrt(),
            ln_sigma_t: eta.sigma_t.ln(),
            ln_sigma_c: eta.sigma_c.ln(),
            bvn: Bvn::with_rho(rho),
        }
    }

    /// log contribution given the residuals and log Λ' terms.
    #[inline]
    pub(crate) fn contribution(&self, delta: bool, xi: bool, b_t: f64, b_c: f64, ld_t: f64, ld_c: f64) -> f64 {
        if delta {
            let zt = b_t / self.sigma_t;
            let arg = (b_c / self.sigma_c - self.rho * zt) / self.sqrt_1mr2;
            -self.ln_sigma_t + norm_log_pdf(zt) + ld_t + norm_log_sf(arg).max(LOG_FLOOR.ln())
        } else if xi {
            let zc = b_c / self.sigma_c;
            let arg = (b_t / self.sigma_t - self.rho * zc) / self.sqrt_1mr2;
            -self.ln_sigma_c + norm_log_pdf(zc) + ld_c + norm_log_sf(arg).max(LOG_FLOOR.ln())
        } else {
            safe_ln(self.bvn.tail(b_t / self.sigma_t, b_c / self.sigma_c))
        }
    }
}

/// Log contribution of one record. With `admin = Some(law)` the factors
/// P(A > y) and f_A(y) are included.
pub fn loglik_contribution(eta: &EtaParams, rec: &ObservedRecord, admin: Option<&AdminLaw>) -> f64 {
    let (_, _, b_t, b_c) = linear_predictors(eta, rec);
    let ld_t = yj_log_deriv(eta.theta1.value(), rec.y);
    let ld_c = yj_log_deriv(eta.theta2.value(), rec.y);
    let base = Kernel::new(eta).contribution(rec.delta, rec.xi, b_t, b_c, ld_t, ld_c);
    match admin {
        None => base,
        Some(law) if rec.delta || rec.xi => base + safe_ln(law.sf(rec.y)),
        Some(law) => base + safe_ln(law.pdf(rec.y)),
    }
}

/// Neumaier-compensated sum.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Λ_θ(y_i) and log Λ'_θ(y_i) for a fixed θ.
#[derive(Debug, Clone)]
struct Transformed {
    theta: f64,
    lam: Vec<f64>,
    log_deriv: Vec<f64>,
}

impl Transformed {
    fn new(theta: f64, y: &[f64]) -> Self {
        Transformed {
            theta,
            lam: y.iter().map(|&t| yj(theta, t)).collect(),
            log_deriv: y.iter().map(|&t| yj_log_deriv(theta, t)).collect(),
        }
    }
}

const CACHE_SLOTS: usize = 12;

/// Repeated evaluation of the sample log-likelihood on a fixed data set
/// and fixed control values. Transformed outcomes are cached per θ, so
/// perturbations of the other parameters reuse them.
pub struct LikelihoodEvaluator<'a> {
    data: &'a Dataset,
    v: Vec<f64>,
    cache: Mutex<Vec<std::sync::Arc<Transformed>>>,
}

impl<'a> LikelihoodEvaluator<'a> {
    pub fn new(data: &'a Dataset, v: &[f64]) -> Result<Self> {
        if v.len() != data.n() {
            return Err(Error::Input("control values do not match the sample size".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("control values must be finite".into()));
        }
        Ok(LikelihoodEvaluator {
            data,
            v: v.to_vec(),
            cache: Mutex::new(Vec::new()),
        })
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn control_values(&self) -> &[f64] {
        &self.v
    }

    fn transformed(&self, theta: f64) -> std::sync::Arc<Transformed> {
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some(pos) = cache.iter().position(|t| t.theta.to_bits() == theta.to_bits()) {
            let hit = cache.remove(pos);
            cache.push(hit.clone());
            return hit;
        }
        let fresh = std::sync::Arc::new(Transformed::new(theta, &self.data.y));
        if cache.len() == CACHE_SLOTS {
            cache.remove(0);
        }
        cache.push(fresh.clone());
        fresh
    }

    /// Per-record log contributions.
    pub fn contributions(&self, eta: &EtaParams) -> Vec<f64> {
        let tt = self.transformed(eta.theta1.value());
        let tc = self.transformed(eta.theta2.value());
        let kernel = Kernel::new(eta);
        let d = self.data;
        (0..d.n())
            .map(|i| {
                let (tau_t, tau_c) = eta.location(d.x_row(i), d.z[i], self.v[i]);
                kernel.contribution(
                    d.delta[i],
                    d.xi[i],
                    tt.lam[i] - tau_t,
                    tc.lam[i] - tau_c,
                    tt.log_deriv[i],
                    tc.log_deriv[i],
                )
            })
            .collect()
    }

    /// Average log-likelihood (1/n) Σ log contributions.
    pub fn mean(&self, eta: &EtaParams) -> f64 {
        kahan_sum(self.contributions(eta)) / self.data.n() as f64
    }
}

/// Average log-likelihood of `data` with control values `v`.
pub fn sample_loglik(eta: &EtaParams, data: &Dataset, v: &[f64]) -> Result<f64> {
    if eta.p() != data.p_x() {
        return Err(Error::Input("parameter and covariate dimensions differ".into()));
    }
    Ok(LikelihoodEvaluator::new(data, v)?.mean(eta))
}
