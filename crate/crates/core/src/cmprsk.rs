//! Competing risks with dependent censoring.
//!
//! There are r ≤ 3 latent log-times T¹, …, Tʳ with transformed linear
//! models and jointly normal errors. The first k are competing events, the
//! remaining r − k are dependent censoring times; an independent censoring
//! time A may also be present. Causes are labelled 1..=r in the data, with
//! 0 for independent censoring.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{norm_log_pdf, norm_log_sf, norm_pdf, norm_sf, partial_corr_raw, Bvn, CovMatrix, FixedTrivariate};
use crate::error::{Error, Result};
use crate::estimator::{control_for_variant, sandwich_core, wald_table, Kind, ParamEstimate, Variant};
use crate::firststage::FirstStageSpec;
use crate::likelihood::{dot, kahan_sum, safe_ln, EtaParams, LOG_FLOOR, RHO_BOUND};
use crate::optim::{minimize, BfgsOptions};
use crate::quad::integrate_adaptive;
use crate::transform::{yj, yj_inv, yj_log_deriv, Theta};

/// Parameters of the r-variate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRepr", try_from = "ParamsRepr")]
pub struct CmprskParams {
    /// Number of competing events among the r latent times.
    pub k: usize,
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub theta: Vec<Theta>,
    pub sigma: CovMatrix,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    k: usize,
    beta: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    lambda: Vec<f64>,
    theta: Vec<f64>,
    sd: Vec<f64>,
    corr: Vec<f64>,
}

impl From<CmprskParams> for ParamsRepr {
    fn from(p: CmprskParams) -> Self {
        let r = p.r();
        ParamsRepr {
            k: p.k,
            theta: p.theta.iter().map(|t| t.value()).collect(),
            sd: (0..r).map(|i| p.sigma.sd(i)).collect(),
            corr: corr_pairs(r).map(|(i, j)| p.sigma.corr(i, j)).collect(),
            beta: p.beta,
            alpha: p.alpha,
            lambda: p.lambda,
        }
    }
}

impl TryFrom<ParamsRepr> for CmprskParams {
    type Error = Error;
    fn try_from(r: ParamsRepr) -> Result<Self> {
        let p = CmprskParams {
            k: r.k,
            beta: r.beta,
            alpha: r.alpha,
            lambda: r.lambda,
            theta: r.theta.into_iter().map(Theta::new).collect::<Result<_>>()?,
            sigma: CovMatrix::from_sd_corr(&r.sd, &r.corr)?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Index pairs (i, j), i < j, in the order ρ_12, ρ_13, …, ρ_(r-1)r.
fn corr_pairs(r: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..r).flat_map(move |i| (i + 1..r).map(move |j| (i, j)))
}

impl CmprskParams {
    pub fn r(&self) -> usize {
        self.alpha.len()
    }

    /// Length of each β_j, intercept included.
    pub fn p(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }

    pub fn len_for(p: usize, r: usize) -> usize {
        r * (p + 4) + r * (r - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r();
        if !(2..=3).contains(&r) {
            return Err(Error::UnsupportedDimension(r));
        }
        if self.k < 2 || self.k > r {
            return Err(Error::Domain(format!(
                "need 2 ≤ k ≤ r, got k = {} with r = {r}",
                self.k
            )));
        }
        let p = self.p();
        if p == 0
            || self.beta.len() != r
            || self.beta.iter().any(|b| b.len() != p)
            || self.lambda.len() != r
            || self.theta.len() != r
            || self.sigma.dim() != r
        {
            return Err(Error::Domain("inconsistent block sizes".into()));
        }
        let finite = self
            .beta
            .iter()
            .flatten()
            .chain(&self.alpha)
            .chain(&self.lambda)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("parameters must be finite".into()));
        }
        Ok(())
    }

    /// Flat layout: β_1, …, β_r, α_1..α_r, λ_1..λ_r, σ_1..σ_r, ρ_12, …, θ_1..θ_r.
    pub fn to_vec(&self) -> Vec<f64> {
        let r = self.r();
        let mut v: Vec<f64> = self.beta.iter().flatten().copied().collect();
        v.extend(&self.alpha);
        v.extend(&self.lambda);
        v.extend((0..r).map(|i| self.sigma.sd(i)));
        v.extend(corr_pairs(r).map(|(i, j)| self.sigma.corr(i, j)));
        v.extend(self.theta.iter().map(|t| t.value()));
        v
    }

    pub fn from_vec(v: &[f64], p: usize, r: usize, k: usize) -> Result<Self> {
        if v.len() != Self::len_for(p, r) {
            return Err(Error::Domain(format!(
                "expected {} values, got {}",
                Self::len_for(p, r),
                v.len()
            )));
        }
        let beta = (0..r).map(|j| v[j * p..(j + 1) * p].to_vec()).collect();
        let o = r * p;
        let alpha = v[o..o + r].to_vec();
        let lambda = v[o + r..o + 2 * r].to_vec();
        let sd = &v[o + 2 * r..o + 3 * r];
        let nc = r * (r - 1) / 2;
        let corr = &v[o + 3 * r..o + 3 * r + nc];
        if corr.iter().any(|c| !(c.abs() < 1.0)) {
            return Err(Error::Domain("correlations must lie in (-1, 1)".into()));
        }
        let theta = v[o + 3 * r + nc..]
            .iter()
            .map(|&t| Theta::new(t))
            .collect::<Result<_>>()?;
        let p = CmprskParams {
            k,
            beta,
            alpha,
            lambda,
            theta,
            sigma: CovMatrix::from_sd_corr(sd, corr)?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameter names in the flat layout.
    pub fn names(covariates: &[String], r: usize) -> Vec<String> {
        let mut names = vec![];
        for j in 1..=r {
            names.push(format!("beta{j}_0"));
            names.extend(covariates.iter().map(|c| format!("beta{j}_{c}")));
        }
        names.extend((1..=r).map(|j| format!("alpha{j}")));
        names.extend((1..=r).map(|j| format!("lambda{j}")));
        names.extend((1..=r).map(|j| format!("sigma{j}")));
        names.extend(corr_pairs(r).map(|(i, j)| format!("rho{}{}", i + 1, j + 1)));
        names.extend((1..=r).map(|j| format!("theta{j}")));
        names
    }

    fn kinds(p: usize, r: usize) -> Vec<Kind> {
        let mut k = vec![Kind::Coef; r * (p + 2)];
        k.extend(vec![Kind::Sigma; r]);
        k.extend(vec![Kind::Rho; r * (r - 1) / 2]);
        k.extend(vec![Kind::Theta; r]);
        k
    }

    /// τ_j = x'β_j + zα_j + vλ_j for every latent time.
    pub fn location(&self, x: &[f64], z: f64, v: f64) -> Vec<f64> {
        (0..self.r())
            .map(|j| dot(x, &self.beta[j]) + z * self.alpha[j] + v * self.lambda[j])
            .collect()
    }

    /// The two-time model written as a competing-risks model with T = T¹, C = T².
    pub fn from_main(eta: &EtaParams) -> Result<Self> {
        Ok(CmprskParams {
            k: 2,
            beta: vec![eta.beta_t.clone(), eta.beta_c.clone()],
            alpha: vec![eta.alpha_t, eta.alpha_c],
            lambda: vec![eta.lambda_t, eta.lambda_c],
            theta: vec![eta.theta1, eta.theta2],
            sigma: CovMatrix::from_sd_corr(&[eta.sigma_t, eta.sigma_c], &[eta.rho.value()])?,
        })
    }

    /// Relabels the latent times: new time i is old time `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let r = self.r();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&i| i >= r || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Domain("not a permutation".into()));
        }
        let m = self.sigma.matrix();
        let sig = DMatrix::from_fn(r, r, |i, j| m[(perm[i], perm[j])]);
        Ok(CmprskParams {
            k: self.k,
            beta: perm.iter().map(|&i| self.beta[i].clone()).collect(),
            alpha: perm.iter().map(|&i| self.alpha[i]).collect(),
            lambda: perm.iter().map(|&i| self.lambda[i]).collect(),
            theta: perm.iter().map(|&i| self.theta[i]).collect(),
            sigma: CovMatrix::new(sig)?,
        })
    }

    fn rho(&self, i: usize, j: usize) -> f64 {
        self.sigma.corr(i, j).clamp(-RHO_BOUND, RHO_BOUND)
    }
}

/// Distribution of the other latent times given that time `cause` equals y.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    /// Zero-based indices of the other latent times.
    pub others: Vec<usize>,
    /// Conditional means m_{q.j} on the transformed scale.
    pub m: Vec<f64>,
    /// Conditional standard deviations s_{q.j}.
    pub s: Vec<f64>,
    /// Partial correlation between the two other times when r = 3.
    pub partial: Option<f64>,
}

/// Conditional means, standard deviations and partial correlation of the
/// other latent times given T^cause = y (cause is 1-based).
pub fn conditional_params(
    params: &CmprskParams,
    cause: usize,
    y: f64,
    x: &[f64],
    z: f64,
    v: f64,
) -> Result<Conditional> {
    let r = params.r();
    if cause == 0 || cause > r {
        return Err(Error::Domain(format!("cause {cause} outside 1..={r}")));
    }
    let j = cause - 1;
    let tau = params.location(x, z, v);
    let b = yj(params.theta[j].value(), y) - tau[j];
    let sj = params.sigma.sd(j);
    let others: Vec<usize> = (0..r).filter(|&q| q != j).collect();
    let m = others
        .iter()
        .map(|&q| tau[q] + params.rho(j, q) * params.sigma.sd(q) / sj * b)
        .collect();
    let s = others
        .iter()
        .map(|&q| params.sigma.sd(q) * (1.0 - params.rho(j, q).powi(2)).sqrt())
        .collect();
    let partial = (others.len() == 2).then(|| {
        partial_corr_raw(
            params.rho(j, others[0]),
            params.rho(j, others[1]),
            params.rho(others[0], others[1]),
        )
    });
    Ok(Conditional { others, m, s, partial })
}

/// Observed competing-risks data: covariates, instrument and treatment in
/// `base`, cause labels 0 (independent censoring) or 1..=r.
#[derive(Debug, Clone, PartialEq)]
pub struct CmprskData {
    pub base: Dataset,
    pub cause: Vec<u8>,
    pub r: usize,
    pub k: usize,
}

impl CmprskData {
    /// The indicator columns of `base` are overwritten with causes 1 and 2.
    pub fn new(mut base: Dataset, cause: Vec<u8>, r: usize, k: usize) -> Result<Self> {
        if !(2..=3).contains(&r) {
            return Err(Error::UnsupportedDimension(r));
        }
        if k < 2 || k > r {
            return Err(Error::Input(format!("need 2 ≤ k ≤ r, got k = {k} with r = {r}")));
        }
        if cause.len() != base.n() {
            return Err(Error::Input("cause column length mismatch".into()));
        }
        if let Some(i) = cause.iter().position(|&c| c as usize > r) {
            return Err(Error::Input(format!("row {i}: cause {} outside 0..={r}", cause[i])));
        }
        base.delta = cause.iter().map(|&c| c == 1).collect();
        base.xi = cause.iter().map(|&c| c == 2).collect();
        Ok(CmprskData { base, cause, r, k })
    }

    pub fn n(&self) -> usize {
        self.cause.len()
    }

    /// Row counts per label 0..=r.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.r + 1];
        for &l in &self.cause {
            c[l as usize] += 1;
        }
        c
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        CmprskData {
            base: self.base.select(idx),
            cause: idx.iter().map(|&i| self.cause[i]).collect(),
            r: self.r,
            k: self.k,
        }
    }
}

struct CauseTerms {
    others: Vec<usize>,
    rho: Vec<f64>,
    root: Vec<f64>,
    ln_sigma: f64,
    inner: Option<Bvn>,
}

/// Precomputed pieces of the per-record log-likelihood.
pub(crate) struct CmprskKernel {
    sd: Vec<f64>,
    causes: Vec<CauseTerms>,
    admin2: Option<Bvn>,
    admin3: Option<FixedTrivariate>,
}

const TRIVARIATE_NODES: usize = 48;

impl CmprskKernel {
    pub(crate) fn new(params: &CmprskParams) -> Self {
        let r = params.r();
        let sd: Vec<f64> = (0..r).map(|i| params.sigma.sd(i)).collect();
        let causes = (0..r)
            .map(|j| {
                let others: Vec<usize> = (0..r).filter(|&q| q != j).collect();
                let rho: Vec<f64> = others.iter().map(|&q| params.rho(j, q)).collect();
                let root = rho.iter().map(|r| ((1.0 - r) * (1.0 + r)).sqrt()).collect();
                let inner = (others.len() == 2).then(|| {
                    let pc = partial_corr_raw(rho[0], rho[1], params.rho(others[0], others[1]));
                    Bvn::with_rho(pc.clamp(-RHO_BOUND, RHO_BOUND))
                });
                CauseTerms {
                    others,
                    rho,
                    root,
                    ln_sigma: sd[j].ln(),
                    inner,
                }
            })
            .collect();
        CmprskKernel {
            causes,
            admin2: (r == 2).then(|| Bvn::with_rho(params.rho(0, 1))),
            admin3: (r == 3)
                .then(|| FixedTrivariate::new(params.rho(0, 1), params.rho(0, 2), params.rho(1, 2), TRIVARIATE_NODES)),
            sd,
        }
    }

    /// log contribution given residuals b_q = Λ_q(y) − τ_q and log Λ'_j(y).
    pub(crate) fn contribution(&self, cause: u8, b: &[f64], ld: &[f64]) -> f64 {
        if cause == 0 {
            let z: Vec<f64> = b.iter().zip(&self.sd).map(|(b, s)| b / s).collect();
            let p = match (&self.admin2, &self.admin3) {
                (Some(bvn), _) => bvn.tail(z[0], z[1]),
                (_, Some(tri)) => tri.tail(&z),
                _ => unreachable!("r is 2 or 3"),
            };
            return safe_ln(p);
        }
        let j = cause as usize - 1;
        let t = &self.causes[j];
        let zj = b[j] / self.sd[j];
        let arg = |i: usize| {
            let q = t.others[i];
            (b[q] / self.sd[q] - t.rho[i] * zj) / t.root[i]
        };
        let log_tail = match &t.inner {
            None => norm_log_sf(arg(0)).max(LOG_FLOOR.ln()),
            Some(bvn) => safe_ln(bvn.tail(arg(0), arg(1))),
        };
        -t.ln_sigma + norm_log_pdf(zj) + ld[j] + log_tail
    }
}

/// Per-record log contributions with control values `v`.
pub fn cmprsk_contributions(params: &CmprskParams, data: &CmprskData, v: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    if params.r() != data.r || params.p() != data.base.p_x() || v.len() != data.n() {
        return Err(Error::Input("parameters, data and control values do not match".into()));
    }
    Ok(contributions_unchecked(params, data, v))
}

fn contributions_unchecked(params: &CmprskParams, data: &CmprskData, v: &[f64]) -> Vec<f64> {
    let r = params.r();
    let kernel = CmprskKernel::new(params);
    let d = &data.base;
    let mut b = vec![0.0; r];
    let mut ld = vec![0.0; r];
    (0..data.n())
        .map(|i| {
            let tau = params.location(d.x_row(i), d.z[i], v[i]);
            for q in 0..r {
                let th = params.theta[q].value();
                b[q] = yj(th, d.y[i]) - tau[q];
                ld[q] = yj_log_deriv(th, d.y[i]);
            }
            kernel.contribution(data.cause[i], &b, &ld)
        })
        .collect()
}

/// Average log-likelihood, without the factors of the independent censoring law.
pub fn cmprsk_loglik(params: &CmprskParams, data: &CmprskData, v: &[f64]) -> Result<f64> {
    Ok(kahan_sum(cmprsk_contributions(params, data, v)?) / data.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmprskFitConfig {
    pub variant: Variant,
    /// Fixed transformation parameters, one per latent time.
    pub theta_fixed: Option<Vec<f64>>,
    pub optim: BfgsOptions,
    pub fd_step: f64,
    pub hessian_step: f64,
    pub level: f64,
    pub compute_vcov: bool,
}

impl Default for CmprskFitConfig {
    fn default() -> Self {
        CmprskFitConfig {
            variant: Variant::TwoStep,
            theta_fixed: None,
            optim: BfgsOptions::default(),
            fd_step: 1e-6,
            hessian_step: f64::EPSILON.powf(0.25),
            level: 0.95,
            compute_vcov: true,
        }
    }
}

impl CmprskFitConfig {
    pub fn new(variant: Variant) -> Self {
        CmprskFitConfig {
            variant,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmprskFit {
    pub variant: Variant,
    pub params: CmprskParams,
    pub gamma_hat: Vec<f64>,
    /// Mean log-likelihood at the estimate.
    pub loglik: f64,
    pub n: usize,
    pub converged: bool,
    pub n_iter: usize,
    pub names: Vec<String>,
    pub free: Vec<usize>,
    pub vcov: Option<Vec<Vec<f64>>>,
    pub estimates: Vec<ParamEstimate>,
    pub inference_error: Option<String>,
}

impl CmprskFit {
    pub fn estimate(&self, name: &str) -> Option<&ParamEstimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

struct CrLayout {
    p: usize,
    r: usize,
    k: usize,
    kinds: Vec<Kind>,
    free: Vec<usize>,
    template: Vec<f64>,
}

impl CrLayout {
    fn new(p: usize, r: usize, k: usize, cfg: &CmprskFitConfig, fix_rho: bool, template: Vec<f64>) -> Self {
        let kinds = CmprskParams::kinds(p, r);
        let mut template = template;
        let mut fixed = vec![false; kinds.len()];
        if cfg.variant == Variant::Naive {
            for j in 0..r {
                fixed[r * p + r + j] = true;
                template[r * p + r + j] = 0.0;
            }
        }
        for (i, kind) in kinds.iter().enumerate() {
            if *kind == Kind::Rho && (fix_rho || cfg.variant == Variant::Independent) {
                fixed[i] = true;
                template[i] = 0.0;
            }
        }
        if let Some(th) = &cfg.theta_fixed {
            let o = kinds.len() - r;
            for j in 0..r {
                fixed[o + j] = true;
                template[o + j] = th[j];
            }
        }
        let free = (0..kinds.len()).filter(|&i| !fixed[i]).collect();
        CrLayout {
            p,
            r,
            k,
            kinds,
            free,
            template,
        }
    }

    fn to_free(&self, full: &[f64]) -> Vec<f64> {
        self.free
            .iter()
            .map(|&i| match self.kinds[i] {
                Kind::Coef => full[i],
                Kind::Sigma => full[i].ln(),
                Kind::Rho => full[i].clamp(-0.999_999, 0.999_999).atanh(),
                Kind::Theta => {
                    let t = full[i].clamp(0.01, 1.99);
                    (t / (2.0 - t)).ln()
                }
            })
            .collect()
    }

    fn params(&self, u: &[f64]) -> Result<CmprskParams> {
        let mut full = self.template.clone();
        for (&i, &x) in self.free.iter().zip(u) {
            full[i] = match self.kinds[i] {
                Kind::Coef => x,
                Kind::Sigma => x.exp(),
                Kind::Rho => x.tanh(),
                Kind::Theta => 2.0 / (1.0 + (-x).exp()),
            };
        }
        CmprskParams::from_vec(&full, self.p, self.r, self.k)
    }

    fn jacobian_diag(&self, u: &[f64]) -> Vec<f64> {
        self.free
            .iter()
            .zip(u)
            .map(|(&i, &x)| match self.kinds[i] {
                Kind::Coef => 1.0,
                Kind::Sigma => x.exp(),
                Kind::Rho => 1.0 - x.tanh().powi(2),
                Kind::Theta => {
                    let s = 1.0 / (1.0 + (-x).exp());
                    2.0 * s * (1.0 - s)
                }
            })
            .collect()
    }
}

/// Per-risk least squares on the rows where that time was observed.
fn crude_start(data: &CmprskData, v: &[f64], with_v: bool, theta: &[f64]) -> Vec<f64> {
    let d = &data.base;
    let (p, r) = (d.p_x(), data.r);
    let k = p + 1 + with_v as usize;
    let mut beta = vec![];
    let (mut alpha, mut lambda, mut sd) = (vec![], vec![], vec![]);
    for j in 0..r {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.cause[i] as usize == j + 1).collect();
        let resp: Vec<f64> = rows.iter().map(|&i| yj(theta[j], d.y[i])).collect();
        let design = DMatrix::from_fn(rows.len(), k, |a, c| {
            let i = rows[a];
            match c {
                c if c < p => d.x_row(i)[c],
                c if c == p => d.z[i],
                _ => v[i],
            }
        });
        let coef = if rows.len() > k + 1 {
            design
                .clone()
                .svd(true, true)
                .solve(&DVector::from_vec(resp.clone()), 1e-10)
                .unwrap_or_else(|_| DVector::zeros(k))
        } else {
            DVector::zeros(k)
        };
        let fitted = &design * &coef;
        let ss: f64 = resp.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        sd.push((ss / rows.len().max(2) as f64).sqrt().clamp(0.05, 1e3));
        beta.extend(coef.rows(0, p).iter().copied());
        alpha.push(coef[p]);
        lambda.push(if with_v { coef[p + 1] } else { 0.0 });
    }
    let mut full = beta;
    full.extend(alpha);
    full.extend(lambda);
    full.extend(sd);
    full.extend(vec![0.0; r * (r - 1) / 2]);
    full.extend(theta);
    full
}

/// Two-step (or naive, independent, oracle) fit of the competing-risks model.
pub fn fit_cmprsk(data: &CmprskData, first_stage: &FirstStageSpec, cfg: &CmprskFitConfig) -> Result<CmprskFit> {
    let r = data.r;
    let counts = data.counts();
    if let Some(j) = (1..=r).find(|&j| counts[j] < 5) {
        return Err(Error::Input(format!(
            "latent time {j} is observed {} times; at least 5 needed",
            counts[j]
        )));
    }
    if let Some(th) = &cfg.theta_fixed {
        if th.len() != r || th.iter().any(|t| !(0.0..=2.0).contains(t)) {
            return Err(Error::Domain(
                "fixed theta needs one value in [0, 2] per latent time".into(),
            ));
        }
    }
    let (v, fs) = control_for_variant(&data.base, first_stage, cfg.variant)?;
    let p = data.base.p_x();
    let theta0 = cfg.theta_fixed.clone().unwrap_or_else(|| vec![1.0; r]);
    let crude = crude_start(data, &v, cfg.variant != Variant::Naive, &theta0);

    let run = |layout: &CrLayout, start: &[f64]| {
        let obj = |u: &[f64]| match layout.params(u) {
            Ok(pr) => {
                let s = -kahan_sum(contributions_unchecked(&pr, data, &v)) / data.n() as f64;
                if s.is_nan() {
                    f64::INFINITY
                } else {
                    s
                }
            }
            // leaving the positive-definite region is rejected
            Err(_) => f64::INFINITY,
        };
        minimize(obj, &layout.to_free(start), &cfg.optim)
    };
    let ind = CrLayout::new(p, r, data.k, cfg, true, crude.clone());
    let first = run(&ind, &crude);
    let mut layout = ind;
    let mut best = first;
    if cfg.variant != Variant::Independent {
        let start = layout.params(&best.x)?.to_vec();
        layout = CrLayout::new(p, r, data.k, cfg, false, start.clone());
        best = run(&layout, &start);
    }
    if !best.converged {
        return Err(Error::Convergence {
            message: format!("{} (gradient ∞-norm {:.3e})", best.message, best.grad_inf),
            last: layout.params(&best.x).map(|p| p.to_vec()).unwrap_or_default(),
        });
    }
    let params = layout.params(&best.x)?;
    let names = CmprskParams::names(&data.base.covariate_names, r);
    let (vcov, inference_error) = if cfg.compute_vcov {
        let contributions = |u: &[f64], w: Option<&[f64]>| -> Result<Vec<f64>> {
            let pr = layout.params(u)?;
            Ok(contributions_unchecked(&pr, data, w.unwrap_or(&v)))
        };
        let correction = match (&fs, cfg.variant.uses_first_stage()) {
            (Some(f), true) => Some((f, first_stage, &data.base)),
            _ => None,
        };
        match sandwich_core(
            &best.x,
            &layout.jacobian_diag(&best.x),
            &contributions,
            correction,
            cfg.fd_step,
            cfg.hessian_step,
        ) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    let estimates = wald_table(
        &params.to_vec(),
        &layout.kinds,
        &names,
        &layout.free,
        vcov.as_ref(),
        cfg.level,
    );
    Ok(CmprskFit {
        variant: cfg.variant,
        loglik: kahan_sum(contributions_unchecked(&params, data, &v)) / data.n() as f64,
        params,
        gamma_hat: fs.map(|f| f.gamma_hat).unwrap_or_default(),
        n: data.n(),
        converged: true,
        n_iter: best.iterations,
        names,
        free: layout.free.clone(),
        vcov: vcov.map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()),
        estimates,
        inference_error,
    })
}

/// Integrand of the cumulative incidence of one cause in u = Λ_j(e).
struct CifIntegrand {
    j: usize,
    tau: Vec<f64>,
    sd: Vec<f64>,
    others: Vec<usize>,
    rho: Vec<f64>,
    root: Vec<f64>,
    theta: Vec<f64>,
    inner: Option<Bvn>,
}

impl CifIntegrand {
    fn new(params: &CmprskParams, cause: usize, x: &[f64], z: f64, v: f64) -> Result<Self> {
        params.validate()?;
        if cause == 0 || cause > params.k {
            return Err(Error::Domain(format!("cause {cause} outside 1..={}", params.k)));
        }
        let j = cause - 1;
        let others: Vec<usize> = (0..params.k).filter(|&q| q != j).collect();
        let rho: Vec<f64> = others.iter().map(|&q| params.rho(j, q)).collect();
        let inner = (others.len() == 2).then(|| {
            let pc = partial_corr_raw(rho[0], rho[1], params.rho(others[0], others[1]));
            Bvn::with_rho(pc.clamp(-RHO_BOUND, RHO_BOUND))
        });
        Ok(CifIntegrand {
            j,
            tau: params.location(x, z, v),
            sd: (0..params.r()).map(|i| params.sigma.sd(i)).collect(),
            root: rho.iter().map(|r| ((1.0 - r) * (1.0 + r)).sqrt()).collect(),
            rho,
            others,
            theta: params.theta.iter().map(|t| t.value()).collect(),
            inner,
        })
    }

    fn eval(&self, u: f64) -> f64 {
        let j = self.j;
        let zj = (u - self.tau[j]) / self.sd[j];
        let e = yj_inv(self.theta[j], u);
        let arg = |i: usize| {
            let q = self.others[i];
            ((yj(self.theta[q], e) - self.tau[q]) / self.sd[q] - self.rho[i] * zj) / self.root[i]
        };
        let surv = match &self.inner {
            None => norm_sf(arg(0)),
            Some(bvn) => bvn.tail(arg(0), arg(1)),
        };
        norm_pdf(zj) / self.sd[j] * surv
    }

    /// Cumulative integrals up to Λ_j(t) for each t of an ascending grid.
    fn curve(&self, grid: &[f64]) -> Result<Vec<f64>> {
        const SPAN: i32 = 12;
        let (tau, s) = (self.tau[self.j], self.sd[self.j]);
        let th = self.theta[self.j];
        let lo = tau - SPAN as f64 * s;
        let hi = tau + SPAN as f64 * s;
        let mut cuts: Vec<f64> = (-SPAN..=SPAN).map(|m| tau + m as f64 * s).collect();
        let targets: Vec<f64> = grid.iter().map(|&t| yj(th, t).clamp(lo, hi)).collect();
        cuts.extend(&targets);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(grid.len());
        let mut ci = 0;
        let mut pos = lo;
        for &target in &targets {
            while ci < cuts.len() && cuts[ci] <= target {
                if cuts[ci] > pos {
                    acc += integrate_adaptive(|u| self.eval(u), pos, cuts[ci], 4e-9, 0.0)?;
                    pos = cuts[ci];
                }
                ci += 1;
            }
            out.push(acc.clamp(0.0, 1.0));
        }
        Ok(out)
    }
}

/// Cumulative incidence I_j(t | x, z, v) of cause j ∈ 1..=k.
pub fn cif(params: &CmprskParams, cause: usize, t: f64, x: &[f64], z: f64, v: f64) -> Result<f64> {
    if t.is_nan() {
        return Err(Error::Domain("NaN time".into()));
    }
    Ok(CifIntegrand::new(params, cause, x, z, v)?.curve(&[t])?[0])
}

/// Cumulative incidence of one cause on an ascending time grid.
pub fn cif_curve(params: &CmprskParams, cause: usize, grid: &[f64], x: &[f64], z: f64, v: f64) -> Result<Vec<f64>> {
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Domain("time grid must be ascending".into()));
    }
    CifIntegrand::new(params, cause, x, z, v)?.curve(grid)
}

/// Cumulative incidence averaged over the covariate rows of `rows`.
pub fn marginal_cif(params: &CmprskParams, cause: usize, grid: &[f64], rows: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != rows.n() {
        return Err(Error::Input("control values do not match the rows".into()));
    }
    let mut acc = vec![0.0; grid.len()];
    for i in 0..rows.n() {
        let c = cif_curve(params, cause, grid, rows.x_row(i), rows.z[i], v[i])?;
        for (a, c) in acc.iter_mut().zip(c) {
            *a += c;
        }
    }
    Ok(acc.into_iter().map(|a| a / rows.n() as f64).collect())
}

/// Aalen–Johansen estimate of the cumulative incidence functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonparametricCif {
    pub times: Vec<f64>,
    /// cif[j][i]: cause j + 1 just after times[i].
    pub cif: Vec<Vec<f64>>,
}

impl NonparametricCif {
    pub fn at(&self, cause: usize, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 || cause == 0 || cause > self.cif.len() {
            0.0
        } else {
            self.cif[cause - 1][idx - 1]
        }
    }
}

/// Nonparametric cumulative incidence under independent censoring; labels
/// are 0 for censored and 1..=k for the causes.
pub fn nonparametric_cif(times: &[f64], labels: &[u8], k: usize) -> Result<NonparametricCif> {
    if times.is_empty() {
        return Err(Error::Domain("no observations".into()));
    }
    if times.len() != labels.len() {
        return Err(Error::Input("times and labels differ in length".into()));
    }
    if times.iter().any(|t| t.is_nan()) || labels.iter().any(|&l| l as usize > k) {
        return Err(Error::Domain("NaN time or label outside 0..=k".into()));
    }
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = NonparametricCif {
        times: vec![],
        cif: vec![vec![]; k],
    };
    let mut surv = 1.0;
    let mut cum = vec![0.0; k];
    let mut risk = times.len();
    let mut i = 0;
    while i < idx.len() {
        let t = times[idx[i]];
        let mut d = vec![0usize; k + 1];
        let mut m = 0;
        while i < idx.len() && times[idx[i]] == t {
            d[labels[idx[i]] as usize] += 1;
            m += 1;
            i += 1;
        }
        let n = risk as f64;
        for j in 0..k {
            cum[j] += surv * d[j + 1] as f64 / n;
        }
        let events: usize = d[1..].iter().sum();
        surv *= 1.0 - events as f64 / n;
        out.times.push(t);
        for j in 0..k {
            out.cif[j].push(cum[j]);
        }
        risk -= m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::rng;
    use crate::likelihood::sample_loglik;
    use crate::simkit::default_truth;

    fn params3(rho: [f64; 3], k: usize) -> CmprskParams {
        CmprskParams {
            k,
            beta: vec![vec![1.0, 0.5], vec![1.4, -0.3], vec![0.8, 0.2]],
            alpha: vec![0.7, -0.4, 0.3],
            lambda: vec![0.5, -0.6, 0.2],
            theta: [1.2, 0.8, 1.0].map(|t| Theta::new(t).unwrap()).to_vec(),
            sigma: CovMatrix::from_sd_corr(&[1.0, 1.3, 0.8], &rho).unwrap(),
        }
    }

    fn small_data(n: usize, r: usize, seed: u64) -> (CmprskData, Vec<f64>) {
        let mut g = rng::stream(seed, &[]);
        let x: Vec<f64> = (0..n).map(|_| rng::normal(&mut g, 0.0, 1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng::normal(&mut g, 1.0, 1.5)).collect();
        let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let w: Vec<f64> = (0..n).map(|_| rng::uniform(&mut g, 0.0, 2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng::normal(&mut g, 0.0, 1.0)).collect();
        let cause: Vec<u8> = (0..n).map(|i| (i % (r + 1)) as u8).collect();
        let base = Dataset::new(y, vec![false; n], vec![false; n], &[x], w, z).unwrap();
        (CmprskData::new(base, cause, r, 2).unwrap(), v)
    }

    #[test]
    fn flat_layout_round_trip() {
        let p = params3([0.3, 0.5, 0.2], 2);
        let v = p.to_vec();
        assert_eq!(v.len(), CmprskParams::len_for(2, 3));
        assert_eq!(CmprskParams::from_vec(&v, 2, 3, 2).unwrap(), p);
        assert_eq!(CmprskParams::names(&["x1".into()], 3).len(), v.len());
        let json = serde_json::to_string(&p).unwrap();
        let back: CmprskParams = serde_json::from_str(&json).unwrap();
        assert!(back.to_vec().iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn rejects_non_pd_and_bad_k() {
        let mut v = params3([0.3, 0.5, 0.2], 2).to_vec();
        let o = 3 * 2 + 9;
        v[o..o + 3].copy_from_slice(&[0.9, 0.9, -0.9]);
        assert!(CmprskParams::from_vec(&v, 2, 3, 2).is_err());
        let mut p = params3([0.0; 3], 2);
        p.k = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn conditional_moments_without_correlation() {
        let p = params3([0.0; 3], 3);
        let c = conditional_params(&p, 1, 0.4, &[1.0, 0.2], 1.0, 0.3).unwrap();
        let tau = p.location(&[1.0, 0.2], 1.0, 0.3);
        assert_eq!(c.m, vec![tau[1], tau[2]]);
        assert_eq!(c.s, vec![1.3, 0.8]);
        assert_eq!(c.partial, Some(0.0));
    }

    #[test]
    fn conditional_moments_match_monte_carlo() {
        let p = params3([0.4, -0.3, 0.25], 3);
        let (x, z, v) = ([1.0, -0.5], 0.0, 0.2);
        let tau = p.location(&x, z, v);
        let l = p.sigma.cholesky_lower();
        let mut g = rng::stream(11, &[]);
        // condition on a thin slab around T¹'s transformed value
        let target = 0.3;
        let (mut s2, mut s3, mut q2, mut k) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..2_000_000 {
            let e = rng::mvn(&mut g, &l);
            if (tau[0] + e[0] - target).abs() < 0.01 {
                s2 += tau[1] + e[1];
                q2 += (tau[1] + e[1]).powi(2);
                s3 += tau[2] + e[2];
                k += 1;
            }
        }
        let y = yj_inv(p.theta[0].value(), target);
        let c = conditional_params(&p, 1, y, &x, z, v).unwrap();
        let kf = k as f64;
        let m2 = s2 / kf;
        let sd2 = (q2 / kf - m2 * m2).sqrt();
        assert!(
            (m2 - c.m[0]).abs() < 3.0 * c.s[0] / kf.sqrt() + 0.01,
            "{m2} vs {}",
            c.m[0]
        );
        assert!((s3 / kf - c.m[1]).abs() < 3.0 * c.s[1] / kf.sqrt() + 0.01);
        assert!((sd2 - c.s[0]).abs() < 0.03, "{sd2} vs {}", c.s[0]);
    }

    #[test]
    fn two_times_reduce_to_the_main_model() {
        let eta = default_truth();
        let p = CmprskParams::from_main(&eta).unwrap();
        let (d3, v) = small_data(300, 2, 5);
        let a = cmprsk_loglik(&p, &d3, &v).unwrap();
        let b = sample_loglik(&eta, &d3.base, &v).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn independent_cause_density_factorizes() {
        let p = params3([0.0; 3], 2);
        let (x, z, v, y) = ([1.0, 0.3], 1.0, -0.2, 0.9);
        let tau = p.location(&x, z, v);
        let b: Vec<f64> = (0..3).map(|q| yj(p.theta[q].value(), y) - tau[q]).collect();
        let ld: Vec<f64> = (0..3).map(|q| yj_log_deriv(p.theta[q].value(), y)).collect();
        let k = CmprskKernel::new(&p);
        let sd = [1.0, 1.3, 0.8];
        let direct = norm_pdf(b[0] / sd[0]) / sd[0] * ld[0].exp() * norm_sf(b[1] / sd[1]) * norm_sf(b[2] / sd[2]);
        assert!((k.contribution(1, &b, &ld).exp() - direct).abs() < 1e-10);
        let admin = norm_sf(b[0] / sd[0]) * norm_sf(b[1] / sd[1]) * norm_sf(b[2] / sd[2]);
        assert!((k.contribution(0, &b, &ld).exp() - admin).abs() < 1e-10);
    }

    #[test]
    fn relabelling_leaves_the_likelihood_unchanged() {
        let p = params3([0.3, 0.5, 0.2], 3);
        let (d, v) = small_data(120, 3, 8);
        let perm = [2, 0, 1];
        let q = p.permuted(&perm).unwrap();
        // old label perm[i] + 1 becomes new label i + 1
        let mut inv = [0u8; 4];
        for (i, &o) in perm.iter().enumerate() {
            inv[o + 1] = i as u8 + 1;
        }
        let cause = d.cause.iter().map(|&c| inv[c as usize]).collect();
        let d2 = CmprskData::new(d.base.clone(), cause, 3, 3).unwrap();
        let a = cmprsk_loglik(&p, &d, &v).unwrap();
        let b = cmprsk_loglik(&q, &d2, &v).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn sub_densities_integrate_to_one() {
        let mut g = rng::stream(21, &[]);
        for _ in 0..5 {
            let rho = [
                rng::uniform(&mut g, -0.5, 0.6),
                rng::uniform(&mut g, -0.4, 0.5),
                rng::uniform(&mut g, -0.3, 0.6),
            ];
            let p = params3(rho, 3);
            let (x, z, v) = ([1.0, rng::normal(&mut g, 0.0, 1.0)], 1.0, rng::normal(&mut g, 0.0, 1.0));
            let tau = p.location(&x, z, v);
            let k = CmprskKernel::new(&p);
            let dens = |y: f64| -> f64 {
                let b: Vec<f64> = (0..3).map(|q| yj(p.theta[q].value(), y) - tau[q]).collect();
                let ld: Vec<f64> = (0..3).map(|q| yj_log_deriv(p.theta[q].value(), y)).collect();
                (1..=3u8).map(|c| k.contribution(c, &b, &ld).exp()).sum()
            };
            let mut cuts: Vec<f64> = (-14..=14)
                .flat_map(|m| (0..3).map(move |q| (q, m)))
                .map(|(q, m)| yj_inv(p.theta[q].value(), tau[q] + m as f64 * p.sigma.sd(q)))
                .collect();
            cuts.sort_by(f64::total_cmp);
            let total: f64 = cuts
                .windows(2)
                .map(|w| integrate_adaptive(dens, w[0], w[1], 1e-12, 0.0).unwrap())
                .sum();
            assert!((total - 1.0).abs() < 5e-5, "{total}");
        }
    }

    #[test]
    fn cif_closure_when_all_times_compete() {
        for rho in [[0.0; 3], [0.3, 0.5, 0.2], [-0.4, 0.2, 0.5]] {
            let p = params3(rho, 3);
            let total: f64 = (1..=3)
                .map(|j| cif(&p, j, f64::INFINITY, &[1.0, 0.4], 1.0, -0.3).unwrap())
                .sum();
            assert!((total - 1.0).abs() < 1e-5, "{total}");
        }
        let p2 = CmprskParams::from_main(&default_truth()).unwrap();
        let total =
            cif(&p2, 1, 1e300, &[1.0, 0.1], 0.0, 0.2).unwrap() + cif(&p2, 2, 1e300, &[1.0, 0.1], 0.0, 0.2).unwrap();
        assert!((total - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cif_with_independent_risks_is_a_product_integral() {
        let mut p = params3([0.0; 3], 2);
        p.theta = vec![Theta::IDENTITY; 3];
        let (x, z, v) = ([1.0, 0.0], 0.0, 0.0);
        let tau = p.location(&x, z, v);
        let t = 1.3;
        let direct = integrate_adaptive(
            |e| norm_pdf((e - tau[0]) / 1.0) * norm_sf((e - tau[1]) / 1.3),
            tau[0] - 12.0,
            t,
            1e-13,
            0.0,
        )
        .unwrap();
        assert!((cif(&p, 1, t, &x, z, v).unwrap() - direct).abs() < 1e-8);
    }

    #[test]
    fn cif_curve_is_monotone_and_bounded() {
        let p = params3([0.3, 0.5, 0.2], 2);
        let grid: Vec<f64> = (0..40).map(|i| -2.0 + 0.25 * i as f64).collect();
        let c1 = cif_curve(&p, 1, &grid, &[1.0, 0.2], 1.0, 0.1).unwrap();
        let c2 = cif_curve(&p, 2, &grid, &[1.0, 0.2], 1.0, 0.1).unwrap();
        assert!(c1.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        assert!(c1.iter().zip(&c2).all(|(a, b)| a + b <= 1.0 + 1e-9 && *a >= 0.0));
        assert!(cif(&p, 3, 1.0, &[1.0, 0.2], 1.0, 0.1).is_err());
        let single = cif(&p, 1, grid[17], &[1.0, 0.2], 1.0, 0.1).unwrap();
        assert!((single - c1[17]).abs() < 1e-7);
    }

    #[test]
    fn cif_matches_monte_carlo() {
        let p = params3([0.3, 0.5, 0.2], 2);
        let (x, z, v) = ([1.0, 0.4], 1.0, -0.2);
        let tau = p.location(&x, z, v);
        let l = p.sigma.cholesky_lower();
        let grid = [0.5, 1.0, 1.5, 2.0, 3.0];
        let mut g = rng::stream(33, &[]);
        let n = 400_000;
        let mut hits = [0usize; 5];
        for _ in 0..n {
            let e = rng::mvn(&mut g, &l);
            let t1 = yj_inv(p.theta[0].value(), tau[0] + e[0]);
            let t2 = yj_inv(p.theta[1].value(), tau[1] + e[1]);
            if t1 <= t2 {
                for (h, &t) in hits.iter_mut().zip(&grid) {
                    *h += (t1 <= t) as usize;
                }
            }
        }
        let c = cif_curve(&p, 1, &grid, &x, z, v).unwrap();
        for (h, c) in hits.iter().zip(c) {
            let ph = *h as f64 / n as f64;
            let se = (c * (1.0 - c) / n as f64).sqrt();
            assert!((ph - c).abs() < 3.0 * se + 1e-6, "{ph} vs {c}");
        }
    }

    #[test]
    fn aalen_johansen_hand_example() {
        let np = nonparametric_cif(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1, 0, 2, 1, 0], 2).unwrap();
        assert!((np.at(1, 1.0) - 0.2).abs() < 1e-15);
        assert!((np.at(2, 3.0) - 0.8 / 3.0).abs() < 1e-15);
        assert!((np.at(1, 4.5) - (0.2 + 0.8 * 2.0 / 3.0 * 0.5)).abs() < 1e-15);
        assert_eq!(np.at(1, 0.5), 0.0);
        assert!(nonparametric_cif(&[], &[], 2).is_err());
    }

    #[test]
    fn aalen_johansen_without_censoring_is_the_sub_cdf() {
        let times = [0.3, 1.2, 0.7, 2.2, 1.9, 0.1, 1.5];
        let labels = [1, 2, 1, 2, 1, 2, 1];
        let np = nonparametric_cif(&times, &labels, 2).unwrap();
        for &t in &[0.2, 0.8, 1.6, 3.0] {
            for j in 1..=2u8 {
                let e = times.iter().zip(&labels).filter(|(&s, &l)| s <= t && l == j).count() as f64 / 7.0;
                assert!((np.at(j as usize, t) - e).abs() < 1e-14);
            }
            let all = times.iter().filter(|&&s| s <= t).count() as f64 / 7.0;
            assert!((np.at(1, t) + np.at(2, t) - all).abs() < 1e-14);
        }
    }
}
