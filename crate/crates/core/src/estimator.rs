//! Two-step maximum-likelihood estimation with sandwich inference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{norm_sf, z_crit};
use crate::error::{Error, Result};
use crate::firststage::{fit_first_stage, FirstStageResult, FirstStageSpec};
use crate::likelihood::{kahan_sum, EtaParams, LikelihoodEvaluator};
use crate::optim::{fd_gradient, fd_hessian, minimize_with_metric, BfgsOptions, OptimResult};
use crate::transform::yj;

/// Which estimator to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Control function from the estimated first stage, dependent censoring.
    TwoStep,
    /// No control function (λ_T = λ_C = 0).
    Naive,
    /// Estimated control function, ρ fixed at 0.
    Independent,
    /// Known control values taken from the data set.
    Oracle,
}

impl Variant {
    pub(crate) fn uses_first_stage(self) -> bool {
        matches!(self, Variant::TwoStep | Variant::Independent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaMode {
    Estimate,
    Fixed(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub variant: Variant,
    pub theta_mode: ThetaMode,
    pub optim: BfgsOptions,
    /// Number of starting points (at least 1).
    pub multistart: usize,
    /// Relative step for per-observation scores.
    pub fd_step: f64,
    /// Relative step for second derivatives.
    pub hessian_step: f64,
    /// Confidence level of the reported intervals.
    pub level: f64,
    pub compute_vcov: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            variant: Variant::TwoStep,
            theta_mode: ThetaMode::Estimate,
            optim: BfgsOptions::default(),
            multistart: 3,
            fd_step: 1e-6,
            hessian_step: f64::EPSILON.powf(0.25),
            level: 0.95,
            compute_vcov: true,
        }
    }
}

impl FitConfig {
    pub fn new(variant: Variant) -> Self {
        FitConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        if !(o.grad_tol > 0.0 && o.stall_tol > 0.0 && o.fd_step > 0.0 && self.fd_step > 0.0 && self.hessian_step > 0.0)
        {
            return Err(Error::Input("tolerances and steps must be positive".into()));
        }
        if o.max_iter == 0 || self.multistart == 0 {
            return Err(Error::Input("max_iter and multistart must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Input("confidence level must lie in (0, 1)".into()));
        }
        if let ThetaMode::Fixed(a, b) = self.theta_mode {
            if !((0.0..=2.0).contains(&a) && (0.0..=2.0).contains(&b)) {
                return Err(Error::Domain("fixed theta must lie in [0, 2]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    Coef,
    Sigma,
    Rho,
    Theta,
}

/// Map between the flat η vector and the free, unconstrained coordinates.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    p: usize,
    free: Vec<usize>,
    template: Vec<f64>,
}

impl Layout {
    fn new(p: usize, variant: Variant, theta_mode: ThetaMode, fix_rho: bool, template: Vec<f64>) -> Self {
        let c = p + 2;
        let mut fixed = vec![];
        if variant == Variant::Naive {
            fixed.extend([p + 1, c + p + 1]);
        }
        if fix_rho || variant == Variant::Independent {
            fixed.push(2 * c + 2);
        }
        if let ThetaMode::Fixed(..) = theta_mode {
            fixed.extend([2 * c + 3, 2 * c + 4]);
        }
        let free = (0..EtaParams::len_for(p)).filter(|i| !fixed.contains(i)).collect();
        let mut template = template;
        if variant == Variant::Naive {
            template[p + 1] = 0.0;
            template[c + p + 1] = 0.0;
        }
        if fix_rho || variant == Variant::Independent {
            template[2 * c + 2] = 0.0;
        }
        if let ThetaMode::Fixed(a, b) = theta_mode {
            template[2 * c + 3] = a;
            template[2 * c + 4] = b;
        }
        Layout { p, free, template }
    }

    fn kind(&self, idx: usize) -> Kind {
        let c = self.p + 2;
        match idx.checked_sub(2 * c) {
            Some(0 | 1) => Kind::Sigma,
            Some(2) => Kind::Rho,
            Some(_) => Kind::Theta,
            None => Kind::Coef,
        }
    }

    fn to_free(&self, eta: &EtaParams) -> Vec<f64> {
        let full = eta.to_vec();
        self.free
            .iter()
            .map(|&i| match self.kind(i) {
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

    fn full_from_free(&self, u: &[f64]) -> Vec<f64> {
        let mut full = self.template.clone();
        for (&i, &x) in self.free.iter().zip(u) {
            full[i] = match self.kind(i) {
                Kind::Coef => x,
                Kind::Sigma => x.exp(),
                Kind::Rho => x.tanh(),
                Kind::Theta => 2.0 / (1.0 + (-x).exp()),
            };
        }
        full
    }

    fn eta(&self, u: &[f64]) -> Result<EtaParams> {
        EtaParams::from_vec(&self.full_from_free(u), self.p)
    }

    /// d(original)/d(unconstrained) for each free coordinate.
    fn jacobian_diag(&self, u: &[f64]) -> Vec<f64> {
        self.free
            .iter()
            .zip(u)
            .map(|(&i, &x)| match self.kind(i) {
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

/// Objective in unconstrained coordinates: minus the mean log-likelihood.
fn objective<'a>(ev: &'a LikelihoodEvaluator<'a>, layout: &'a Layout) -> impl Fn(&[f64]) -> f64 + 'a {
    move |u: &[f64]| match layout.eta(u) {
        Ok(eta) => {
            let v = -ev.mean(&eta);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        }
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub name: String,
    pub estimate: f64,
    pub free: bool,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Two-sided Wald p-value against `null_value`.
    pub p_value: Option<f64>,
    pub null_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub initial_loglik: f64,
    pub final_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub variant: Variant,
    pub theta_mode: ThetaMode,
    pub eta_hat: EtaParams,
    pub gamma_hat: Vec<f64>,
    /// Mean log-likelihood at η̂.
    pub loglik: f64,
    pub n: usize,
    pub converged: bool,
    pub n_iter: usize,
    pub names: Vec<String>,
    /// Indices (into the flat η layout) of the estimated parameters.
    pub free: Vec<usize>,
    /// Covariance of the free parameters on the original scale.
    pub vcov: Option<Vec<Vec<f64>>>,
    pub estimates: Vec<ParamEstimate>,
    pub level: f64,
    pub inference_error: Option<String>,
    pub starts: Vec<StartSummary>,
}

impl FitResult {
    pub fn vcov_matrix(&self) -> Option<DMatrix<f64>> {
        self.vcov.as_ref().map(|rows| {
            let k = rows.len();
            DMatrix::from_fn(k, k, |i, j| rows[i][j])
        })
    }

    pub fn estimate(&self, name: &str) -> Option<&ParamEstimate> {
        self.estimates.iter().find(|e| e.name == name)
    }

    /// Standard error of a free parameter by name.
    pub fn se(&self, name: &str) -> Option<f64> {
        self.estimate(name).and_then(|e| e.se)
    }
}

/// Counts needed before a fit is attempted.
fn check_sample(data: &Dataset) -> Result<()> {
    let (e, c, _) = data.outcome_counts();
    if e < 10 || c < 10 {
        return Err(Error::Input(format!(
            "need at least 10 observed events and 10 dependent censorings, got {e} and {c}"
        )));
    }
    Ok(())
}

/// Control values used by a variant, with the first-stage fit when estimated.
pub fn control_for_variant(
    data: &Dataset,
    first_stage: &FirstStageSpec,
    variant: Variant,
) -> Result<(Vec<f64>, Option<FirstStageResult>)> {
    match variant {
        Variant::TwoStep | Variant::Independent => {
            let fs = fit_first_stage(data, first_stage)?;
            Ok((fs.v_hat.clone(), Some(fs)))
        }
        Variant::Oracle => {
            let v = data
                .control
                .clone()
                .ok_or_else(|| Error::Input("oracle variant needs a known control column".into()))?;
            Ok((v, None))
        }
        Variant::Naive => Ok((vec![0.0; data.n()], None)),
    }
}

/// Least-squares starting values from the uncensored rows of each outcome.
fn crude_start(data: &Dataset, v: &[f64], variant: Variant, theta: (f64, f64)) -> EtaParams {
    let p = data.p_x();
    let with_v = variant != Variant::Naive;
    let block = |rows: Vec<usize>, th: f64| -> (Vec<f64>, f64, f64, f64) {
        let k = p + 1 + with_v as usize;
        let resp: Vec<f64> = rows.iter().map(|&i| yj(th, data.y[i])).collect();
        let design = DMatrix::from_fn(rows.len(), k, |r, j| {
            let i = rows[r];
            if j < p {
                data.x_row(i)[j]
            } else if j == p {
                data.z[i]
            } else {
                v[i]
            }
        });
        let b = DVector::from_vec(resp.clone());
        let coef = design
            .clone()
            .svd(true, true)
            .solve(&b, 1e-10)
            .unwrap_or_else(|_| DVector::zeros(k));
        let fitted = &design * &coef;
        let ss: f64 = resp.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let sd = (ss / rows.len().max(2) as f64).sqrt().clamp(0.05, 1e3);
        let lam = if with_v { coef[p + 1] } else { 0.0 };
        (coef.rows(0, p).iter().copied().collect(), coef[p], lam, sd)
    };
    let ev: Vec<usize> = (0..data.n()).filter(|&i| data.delta[i]).collect();
    let cv: Vec<usize> = (0..data.n()).filter(|&i| data.xi[i]).collect();
    let (bt, at, lt, st) = block(ev, theta.0);
    let (bc, ac, lc, sc) = block(cv, theta.1);
    EtaParams {
        beta_t: bt,
        alpha_t: at,
        lambda_t: lt,
        beta_c: bc,
        alpha_c: ac,
        lambda_c: lc,
        sigma_t: st,
        sigma_c: sc,
        rho: crate::dist::Corr::ZERO,
        theta1: crate::transform::Theta::clamped(theta.0),
        theta2: crate::transform::Theta::clamped(theta.1),
    }
}

const JITTER: [(f64, f64); 8] = [
    (1.0, 0.5),
    (1.0, -0.5),
    (0.5, 0.0),
    (1.5, 0.0),
    (0.5, 0.5),
    (1.5, 0.5),
    (0.5, -0.5),
    (1.5, -0.5),
];

struct Run {
    eta: EtaParams,
    opt: OptimResult,
    summary: StartSummary,
}

fn run_from(
    ev: &LikelihoodEvaluator,
    layout: &Layout,
    start: &EtaParams,
    metric: Option<&DMatrix<f64>>,
    opts: &BfgsOptions,
) -> Result<Run> {
    let f = objective(ev, layout);
    let u0 = layout.to_free(start);
    let initial = -f(&u0);
    let opt = minimize_with_metric(&f, &u0, metric, opts);
    let eta = layout.eta(&opt.x)?;
    let summary = StartSummary {
        initial_loglik: initial,
        final_loglik: -opt.f,
        converged: opt.converged,
        iterations: opt.iterations,
    };
    Ok(Run { eta, opt, summary })
}

fn theta_start(mode: ThetaMode) -> (f64, f64) {
    match mode {
        ThetaMode::Estimate => (1.0, 1.0),
        ThetaMode::Fixed(a, b) => (a, b),
    }
}

/// Fits η for the configured variant.
pub fn fit(data: &Dataset, first_stage: &FirstStageSpec, cfg: &FitConfig) -> Result<FitResult> {
    fit_impl(data, first_stage, cfg, None, None)
}

/// Fits η from a given starting value, without multistart.
pub fn fit_from(data: &Dataset, first_stage: &FirstStageSpec, cfg: &FitConfig, start: &EtaParams) -> Result<FitResult> {
    fit_impl(data, first_stage, cfg, Some(start), None)
}

/// A starting value together with the inverse Hessian of the objective
/// there, for repeated refits on samples resembling the original one.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub eta: EtaParams,
    metric: Option<DMatrix<f64>>,
}

impl WarmStart {
    /// Computes the metric at `eta` on `data`. A Hessian that is not
    /// positive definite leaves the metric empty.
    pub fn new(data: &Dataset, first_stage: &FirstStageSpec, cfg: &FitConfig, eta: &EtaParams) -> Result<Self> {
        let (v, _) = control_for_variant(data, first_stage, cfg.variant)?;
        let ev = LikelihoodEvaluator::new(data, &v)?;
        let layout = Layout::new(eta.p(), cfg.variant, cfg.theta_mode, false, eta.to_vec());
        let f = objective(&ev, &layout);
        let h = fd_hessian(&f, &layout.to_free(eta), cfg.hessian_step);
        let metric = h.cholesky().map(|c| c.inverse());
        Ok(WarmStart {
            eta: eta.clone(),
            metric,
        })
    }

    pub fn has_metric(&self) -> bool {
        self.metric.is_some()
    }
}

/// Fits η from a warm start, without multistart.
pub fn fit_warm(data: &Dataset, first_stage: &FirstStageSpec, cfg: &FitConfig, warm: &WarmStart) -> Result<FitResult> {
    fit_impl(data, first_stage, cfg, Some(&warm.eta), warm.metric.as_ref())
}

fn fit_impl(
    data: &Dataset,
    first_stage: &FirstStageSpec,
    cfg: &FitConfig,
    start: Option<&EtaParams>,
    metric: Option<&DMatrix<f64>>,
) -> Result<FitResult> {
    cfg.validate()?;
    check_sample(data)?;
    let (v, fs) = control_for_variant(data, first_stage, cfg.variant)?;
    let ev = LikelihoodEvaluator::new(data, &v)?;
    let p = data.p_x();
    let th = theta_start(cfg.theta_mode);

    let mut runs: Vec<Run> = Vec::new();
    if let Some(s) = start {
        if s.p() != p {
            return Err(Error::Input("start has the wrong covariate dimension".into()));
        }
        let layout = Layout::new(p, cfg.variant, cfg.theta_mode, false, s.to_vec());
        runs.push(run_from(&ev, &layout, s, metric, &cfg.optim)?);
    } else {
        let crude = crude_start(data, &v, cfg.variant, th);
        let ind_layout = Layout::new(p, cfg.variant, cfg.theta_mode, true, crude.to_vec());
        let ind = run_from(&ev, &ind_layout, &crude, None, &cfg.optim)?;
        let base = ind.eta.clone();
        if cfg.variant == Variant::Independent {
            runs.push(ind);
        } else {
            let layout = Layout::new(p, cfg.variant, cfg.theta_mode, false, base.to_vec());
            runs.push(run_from(&ev, &layout, &base, None, &cfg.optim)?);
        }
        for &(theta, rho) in JITTER.iter().take(cfg.multistart - 1) {
            let mut s = base.clone();
            if let ThetaMode::Estimate = cfg.theta_mode {
                s.theta1 = crate::transform::Theta::clamped(theta);
                s.theta2 = crate::transform::Theta::clamped(theta);
            }
            if cfg.variant != Variant::Independent {
                s.rho = crate::dist::Corr::new(rho)?;
            }
            let layout = Layout::new(p, cfg.variant, cfg.theta_mode, false, s.to_vec());
            runs.push(run_from(&ev, &layout, &s, None, &cfg.optim)?);
        }
    }

    let starts: Vec<StartSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let best = runs
        .into_iter()
        .filter(|r| r.opt.f.is_finite())
        .min_by(|a, b| {
            // converged runs first, then the larger log-likelihood
            (!a.opt.converged, a.opt.f)
                .partial_cmp(&(!b.opt.converged, b.opt.f))
                .expect("finite")
        })
        .ok_or_else(|| Error::Convergence {
            message: "no start produced a finite log-likelihood".into(),
            last: vec![],
        })?;
    if !best.opt.converged {
        return Err(Error::Convergence {
            message: format!(
                "no start converged ({}; gradient ∞-norm {:.3e})",
                best.opt.message, best.opt.grad_inf
            ),
            last: best.eta.to_vec(),
        });
    }

    let layout = Layout::new(p, cfg.variant, cfg.theta_mode, false, best.eta.to_vec());
    let names = EtaParams::names(&data.covariate_names);
    let eta_hat = best.eta;
    let loglik = ev.mean(&eta_hat);
    let (vcov, inference_error) = if cfg.compute_vcov {
        let correction = if cfg.variant.uses_first_stage() {
            fs.as_ref()
        } else {
            None
        };
        match sandwich_in_layout(&ev, &layout, &eta_hat, correction, first_stage, cfg) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    let estimates = confidence_intervals(&eta_hat, &names, &layout.free, vcov.as_ref(), cfg.level);
    Ok(FitResult {
        variant: cfg.variant,
        theta_mode: cfg.theta_mode,
        gamma_hat: fs.map(|f| f.gamma_hat).unwrap_or_default(),
        eta_hat,
        loglik,
        n: data.n(),
        converged: true,
        n_iter: best.opt.iterations,
        names,
        free: layout.free.clone(),
        vcov: vcov.map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()),
        estimates,
        level: cfg.level,
        inference_error,
        starts,
    })
}

/// Sandwich covariance of the free parameters of η on the original scale.
///
/// `first_stage` supplies the correction for the estimated control
/// function; pass `None` when the control values are known or unused.
pub fn sandwich_vcov(
    data: &Dataset,
    v: &[f64],
    eta_hat: &EtaParams,
    free: &[usize],
    first_stage: Option<&FirstStageResult>,
    cfg: &FitConfig,
) -> Result<DMatrix<f64>> {
    let ev = LikelihoodEvaluator::new(data, v)?;
    let mut layout = Layout::new(
        eta_hat.p(),
        Variant::TwoStep,
        ThetaMode::Estimate,
        false,
        eta_hat.to_vec(),
    );
    layout.free = free.to_vec();
    let spec = first_stage.map(|f| f.spec.clone());
    let spec = spec.unwrap_or_else(|| FirstStageSpec::new(crate::firststage::FirstStageKind::ContinuousLinear));
    sandwich_in_layout(&ev, &layout, eta_hat, first_stage, &spec, cfg)
}

fn sandwich_in_layout(
    ev: &LikelihoodEvaluator,
    layout: &Layout,
    eta_hat: &EtaParams,
    first_stage: Option<&FirstStageResult>,
    spec: &FirstStageSpec,
    cfg: &FitConfig,
) -> Result<DMatrix<f64>> {
    let data = ev.data();
    let u = layout.to_free(eta_hat);
    let contributions = |x: &[f64], v: Option<&[f64]>| -> Result<Vec<f64>> {
        let eta = layout.eta(x)?;
        match v {
            None => Ok(ev.contributions(&eta)),
            Some(v) => Ok(LikelihoodEvaluator::new(data, v)?.contributions(&eta)),
        }
    };
    let correction = first_stage.map(|fs| (fs, spec, data));
    sandwich_core(
        &u,
        &layout.jacobian_diag(&u),
        &contributions,
        correction,
        cfg.fd_step,
        cfg.hessian_step,
    )
}

/// Sandwich covariance in unconstrained coordinates `u`, mapped to the
/// original scale through the diagonal Jacobian `jac`.
///
/// `contributions(u, v)` returns per-record log contributions, with
/// `v = None` meaning the control values of the fit.
pub(crate) fn sandwich_core(
    u: &[f64],
    jac: &[f64],
    contributions: &dyn Fn(&[f64], Option<&[f64]>) -> Result<Vec<f64>>,
    first_stage: Option<(&FirstStageResult, &FirstStageSpec, &Dataset)>,
    fd_step: f64,
    hessian_step: f64,
) -> Result<DMatrix<f64>> {
    let k = u.len();
    let n = contributions(u, None)?.len();

    // per-observation scores in the unconstrained coordinates
    let mut scores = DMatrix::<f64>::zeros(n, k);
    let mut up = u.to_vec();
    for j in 0..k {
        let h = fd_step * u[j].abs().max(1.0);
        up[j] = u[j] + h;
        let cp = contributions(&up, None)?;
        up[j] = u[j] - h;
        let cm = contributions(&up, None)?;
        up[j] = u[j];
        for i in 0..n {
            scores[(i, j)] = (cp[i] - cm[i]) / (2.0 * h);
        }
    }

    let mean_at = |x: &[f64], v: Option<&[f64]>| {
        contributions(x, v)
            .map(|c| kahan_sum(c) / n as f64)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let hess = fd_hessian(&|x: &[f64]| mean_at(x, None), u, hessian_step);
    let hess = (&hess + hess.transpose()) * 0.5;
    let hinv = hess
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Inference("Hessian of the log-likelihood is singular".into()))?;
    if hinv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Inference("Hessian of the log-likelihood is singular".into()));
    }

    let mut infl = scores;
    if let Some((fs, spec, data)) = first_stage {
        let psi = fs.influence_rows()?;
        // Ĥ_γ: derivative of the mean score in γ, recomputing the control values
        let q = fs.gamma_hat.len();
        let mut h_gamma = DMatrix::zeros(k, q);
        let mut g = fs.gamma_hat.clone();
        for c in 0..q {
            let h = hessian_step * g[c].abs().max(1.0);
            let mut grads = Vec::with_capacity(2);
            for s in [1.0, -1.0] {
                g[c] = fs.gamma_hat[c] + s * h;
                let v = spec.control_values(data, &g)?;
                grads.push(fd_gradient(&|x: &[f64]| mean_at(x, Some(&v)), u, hessian_step));
            }
            g[c] = fs.gamma_hat[c];
            for j in 0..k {
                h_gamma[(j, c)] = (grads[0][j] - grads[1][j]) / (2.0 * h);
            }
        }
        infl += psi * h_gamma.transpose();
    }
    let meat = infl.transpose() * &infl / n as f64;
    let sigma_u = &hinv * meat * hinv.transpose() / n as f64;
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(jac));
    let sigma = &d * sigma_u * &d;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(Error::Inference("non-finite covariance".into()));
    }
    let min_eig = sigma.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-10 * sigma.trace().abs() {
        return Err(Error::Inference(format!(
            "covariance is not positive semi-definite (λ_min = {min_eig:e})"
        )));
    }
    Ok(sigma)
}

/// Wald intervals: raw scale for coefficients and θ, log scale for σ,
/// Fisher-z scale for ρ.
pub fn confidence_intervals(
    eta: &EtaParams,
    names: &[String],
    free: &[usize],
    vcov: Option<&DMatrix<f64>>,
    level: f64,
) -> Vec<ParamEstimate> {
    let c = eta.p() + 2;
    let kinds: Vec<Kind> = (0..EtaParams::len_for(eta.p()))
        .map(|i| match i.checked_sub(2 * c) {
            Some(0 | 1) => Kind::Sigma,
            Some(2) => Kind::Rho,
            Some(_) => Kind::Theta,
            None => Kind::Coef,
        })
        .collect();
    wald_table(&eta.to_vec(), &kinds, names, free, vcov, level)
}

pub(crate) fn wald_table(
    full: &[f64],
    kinds: &[Kind],
    names: &[String],
    free: &[usize],
    vcov: Option<&DMatrix<f64>>,
    level: f64,
) -> Vec<ParamEstimate> {
    let zc = z_crit(level);
    full.iter()
        .enumerate()
        .map(|(i, &est)| {
            let pos = free.iter().position(|&f| f == i);
            let se = match (pos, vcov) {
                (Some(k), Some(m)) => Some(m[(k, k)].max(0.0).sqrt()),
                _ => None,
            };
            let null_value = if kinds[i] == Kind::Theta { 1.0 } else { 0.0 };
            let ci = se.map(|s| match kinds[i] {
                Kind::Sigma => {
                    let sl = s / est;
                    ((est.ln() - zc * sl).exp(), (est.ln() + zc * sl).exp())
                }
                Kind::Rho => {
                    let sz = s / (1.0 - est * est);
                    ((est.atanh() - zc * sz).tanh(), (est.atanh() + zc * sz).tanh())
                }
                _ => (est - zc * s, est + zc * s),
            });
            let p_value = match se {
                Some(s) if kinds[i] != Kind::Sigma && s > 0.0 => Some(2.0 * norm_sf(((est - null_value) / s).abs())),
                _ => None,
            };
            ParamEstimate {
                name: names[i].clone(),
                estimate: est,
                free: pos.is_some(),
                se,
                ci,
                p_value,
                null_value,
            }
        })
        .collect()
}
