//! First-stage model for the endogenous treatment and its control function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dist::{norm_log_cdf, norm_log_pdf, norm_log_sf};
use crate::error::{Error, Result};

const MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstStageKind {
    /// Z = W'γ + V, estimated by least squares.
    ContinuousLinear,
    /// Z = 1(W'γ > ν) with logistic ν.
    BinaryLogit,
    /// Z = 1(W'γ > ν) with standard normal ν.
    BinaryProbit,
    /// Z = 1(X'γ > ν)·W̃ with logistic ν; γ is fitted on the W̃ = 1 subgroup.
    BinaryOneSidedLogit,
}

impl FirstStageKind {
    pub fn is_binary(self) -> bool {
        !matches!(self, FirstStageKind::ContinuousLinear)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstStageSpec {
    pub kind: FirstStageKind,
    /// Indices into the row (1, X̃, W̃) that form the first-stage design.
    /// `None` means all of them, or (1, X̃) for the one-sided kind.
    pub columns: Option<Vec<usize>>,
}

impl FirstStageSpec {
    pub fn new(kind: FirstStageKind) -> Self {
        FirstStageSpec { kind, columns: None }
    }

    pub fn with_columns(mut self, columns: Vec<usize>) -> Self {
        self.columns = Some(columns);
        self
    }

    fn column_indices(&self, data: &Dataset) -> Vec<usize> {
        match &self.columns {
            Some(c) => c.clone(),
            None => match self.kind {
                FirstStageKind::BinaryOneSidedLogit => (0..data.p_x()).collect(),
                _ => (0..=data.p_x()).collect(),
            },
        }
    }

    /// First-stage design matrix, one row per subject.
    pub fn design(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let cols = self.column_indices(data);
        let full = data.p_x() + 1;
        if cols.is_empty() || cols.iter().any(|&c| c >= full) {
            return Err(Error::Input(format!(
                "first-stage columns must be non-empty indices below {full}"
            )));
        }
        Ok(DMatrix::from_fn(data.n(), cols.len(), |i, j| {
            let c = cols[j];
            if c < data.p_x() {
                data.x_row(i)[c]
            } else {
                data.w_tilde[i]
            }
        }))
    }

    /// Rows that enter the first-stage likelihood.
    fn in_sample(&self, data: &Dataset, i: usize) -> bool {
        self.kind != FirstStageKind::BinaryOneSidedLogit || data.w_tilde[i] != 0.0
    }

    /// Control values for an arbitrary γ.
    pub fn control_values(&self, data: &Dataset, gamma: &[f64]) -> Result<Vec<f64>> {
        let w = self.design(data)?;
        check_gamma(gamma, w.ncols())?;
        Ok((0..data.n())
            .map(|i| control_from_index(self.kind, row_dot(&w, i, gamma), data.z[i]))
            .collect())
    }

    /// Per-subject first-stage scores h_m as an n × p matrix.
    pub fn score_rows(&self, data: &Dataset, gamma: &[f64]) -> Result<DMatrix<f64>> {
        let w = self.design(data)?;
        check_gamma(gamma, w.ncols())?;
        let mut h = DMatrix::zeros(data.n(), w.ncols());
        for i in 0..data.n() {
            if !self.in_sample(data, i) {
                continue;
            }
            let g = score_factor(self.kind, row_dot(&w, i, gamma), data.z[i]);
            for j in 0..w.ncols() {
                h[(i, j)] = g * w[(i, j)];
            }
        }
        Ok(h)
    }

    /// Analytic Jacobian of the mean score, M̂ = n⁻¹ Σ ∇γ h_m.
    pub fn score_jacobian(&self, data: &Dataset, gamma: &[f64]) -> Result<DMatrix<f64>> {
        let w = self.design(data)?;
        check_gamma(gamma, w.ncols())?;
        let p = w.ncols();
        let mut m = DMatrix::zeros(p, p);
        for i in 0..data.n() {
            if !self.in_sample(data, i) {
                continue;
            }
            let d = score_factor_deriv(self.kind, row_dot(&w, i, gamma), data.z[i]);
            let row = w.row(i);
            for a in 0..p {
                for b in 0..p {
                    m[(a, b)] += d * row[a] * row[b];
                }
            }
        }
        Ok(m / data.n() as f64)
    }

    fn loglik(&self, data: &Dataset, w: &DMatrix<f64>, gamma: &[f64]) -> f64 {
        (0..data.n())
            .filter(|&i| self.in_sample(data, i))
            .map(|i| binary_loglik(self.kind, row_dot(w, i, gamma), data.z[i]))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct FirstStageResult {
    pub spec: FirstStageSpec,
    pub gamma_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    /// n × p matrix of per-subject scores h_m(W_i, Z_i, γ̂).
    pub score_rows: DMatrix<f64>,
    /// p × p Jacobian of the mean score at γ̂.
    pub m_hat: DMatrix<f64>,
    pub iterations: usize,
}

impl FirstStageResult {
    /// Influence rows Ψ̂_i = −M̂⁻¹ h_m,i as an n × p matrix.
    pub fn influence_rows(&self) -> Result<DMatrix<f64>> {
        let inv = self
            .m_hat
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Inference("first-stage Jacobian is singular".into()))?;
        Ok(-(&self.score_rows * inv.transpose()))
    }

    /// Asymptotic covariance of γ̂ from the first-stage sandwich.
    pub fn vcov(&self) -> Result<DMatrix<f64>> {
        let psi = self.influence_rows()?;
        let n = psi.nrows() as f64;
        Ok(psi.transpose() * &psi / (n * n))
    }
}

/// Control value for one subject with design row `w`.
pub fn control_value(kind: FirstStageKind, gamma: &[f64], w: &[f64], z: f64) -> Result<f64> {
    if gamma.len() != w.len() {
        return Err(Error::Input("gamma and w differ in length".into()));
    }
    if gamma.iter().chain(w).any(|v| !v.is_finite()) || !z.is_finite() {
        return Err(Error::Domain("control_value needs finite inputs".into()));
    }
    let c: f64 = gamma.iter().zip(w).map(|(g, x)| g * x).sum();
    Ok(control_from_index(kind, c, z))
}

fn control_from_index(kind: FirstStageKind, c: f64, z: f64) -> f64 {
    match kind {
        FirstStageKind::ContinuousLinear => z - c,
        FirstStageKind::BinaryLogit | FirstStageKind::BinaryOneSidedLogit => {
            if z > 0.5 {
                logistic_lower_mean(c)
            } else {
                logistic_upper_mean(c)
            }
        }
        FirstStageKind::BinaryProbit => {
            if z > 0.5 {
                -(norm_log_pdf(c) - norm_log_cdf(c)).exp()
            } else {
                (norm_log_pdf(c) - norm_log_sf(c)).exp()
            }
        }
    }
}

/// E[ν | ν > c] for standard logistic ν.
pub fn logistic_upper_mean(c: f64) -> f64 {
    if c > 0.0 {
        let u = (-c).exp();
        c + (1.0 + u) * u.ln_1p() / u
    } else {
        let e = c.exp();
        (1.0 + e) * e.ln_1p() - c * e
    }
}

/// E[ν | ν < c] for standard logistic ν.
pub fn logistic_lower_mean(c: f64) -> f64 {
    -logistic_upper_mean(-c)
}

fn logistic(c: f64) -> f64 {
    if c >= 0.0 {
        1.0 / (1.0 + (-c).exp())
    } else {
        let e = c.exp();
        e / (1.0 + e)
    }
}

/// log Λ(c), stable for large |c|.
fn log_logistic(c: f64) -> f64 {
    if c >= 0.0 {
        -(-c).exp().ln_1p()
    } else {
        c - c.exp().ln_1p()
    }
}

fn binary_loglik(kind: FirstStageKind, c: f64, z: f64) -> f64 {
    let one = z > 0.5;
    match kind {
        FirstStageKind::BinaryProbit => {
            if one {
                norm_log_cdf(c)
            } else {
                norm_log_sf(c)
            }
        }
        FirstStageKind::ContinuousLinear => {
            let r = z - c;
            -0.5 * r * r
        }
        _ => {
            if one {
                log_logistic(c)
            } else {
                log_logistic(-c)
            }
        }
    }
}

/// Scalar g with h_m = g · w.
fn score_factor(kind: FirstStageKind, c: f64, z: f64) -> f64 {
    match kind {
        FirstStageKind::ContinuousLinear => z - c,
        FirstStageKind::BinaryProbit => {
            if z > 0.5 {
                (norm_log_pdf(c) - norm_log_cdf(c)).exp()
            } else {
                -(norm_log_pdf(c) - norm_log_sf(c)).exp()
            }
        }
        _ => z - logistic(c),
    }
}

/// dg/dc for the score factor.
fn score_factor_deriv(kind: FirstStageKind, c: f64, z: f64) -> f64 {
    match kind {
        FirstStageKind::ContinuousLinear => -1.0,
        FirstStageKind::BinaryProbit => {
            if z > 0.5 {
                let l = (norm_log_pdf(c) - norm_log_cdf(c)).exp();
                -l * (c + l)
            } else {
                let l = (norm_log_pdf(c) - norm_log_sf(c)).exp();
                -l * (l - c)
            }
        }
        _ => {
            let p = logistic(c);
            -p * (1.0 - p)
        }
    }
}

fn row_dot(w: &DMatrix<f64>, i: usize, gamma: &[f64]) -> f64 {
    gamma.iter().enumerate().map(|(j, g)| g * w[(i, j)]).sum()
}

fn check_gamma(gamma: &[f64], p: usize) -> Result<()> {
    if gamma.len() != p {
        return Err(Error::Input(format!("gamma has length {}, expected {p}", gamma.len())));
    }
    if gamma.iter().any(|g| !g.is_finite()) {
        return Err(Error::Domain("gamma must be finite".into()));
    }
    Ok(())
}

fn check_rank(w: &DMatrix<f64>, rows: &[usize]) -> Result<()> {
    let p = w.ncols();
    let mut g = DMatrix::<f64>::zeros(p, p);
    for &i in rows {
        let r = w.row(i);
        g += r.transpose() * r;
    }
    g /= rows.len().max(1) as f64;
    let ev = g.symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::Estimation("first-stage design is rank deficient".into()));
    }
    Ok(())
}

/// Estimates γ and the control values V̂.
pub fn fit_first_stage(data: &Dataset, spec: &FirstStageSpec) -> Result<FirstStageResult> {
    let w = spec.design(data)?;
    let p = w.ncols();
    let rows: Vec<usize> = (0..data.n()).filter(|&i| spec.in_sample(data, i)).collect();
    if rows.len() <= p {
        return Err(Error::Estimation(format!(
            "first stage needs more than {p} observations, got {}",
            rows.len()
        )));
    }
    if spec.kind.is_binary() && data.z.iter().any(|&z| z != 0.0 && z != 1.0) {
        return Err(Error::Input("binary first stage needs Z in {0, 1}".into()));
    }
    check_rank(&w, &rows)?;

    let (gamma, iterations) = match spec.kind {
        FirstStageKind::ContinuousLinear => (ols(&w, &data.z)?, 0),
        _ => newton(data, spec, &w)?,
    };
    let v_hat = spec.control_values(data, &gamma)?;
    let score_rows = spec.score_rows(data, &gamma)?;
    let m_hat = spec.score_jacobian(data, &gamma)?;
    Ok(FirstStageResult {
        spec: spec.clone(),
        gamma_hat: gamma,
        v_hat,
        score_rows,
        m_hat,
        iterations,
    })
}

fn ols(w: &DMatrix<f64>, z: &[f64]) -> Result<Vec<f64>> {
    let zv = DVector::from_column_slice(z);
    let qr = w.clone().qr();
    let qtz = qr.q().transpose() * zv;
    let beta = qr
        .r()
        .solve_upper_triangular(&qtz)
        .ok_or_else(|| Error::Estimation("least-squares system is singular".into()))?;
    Ok(beta.iter().copied().collect())
}

/// Flags (quasi-)separation: the information matrix collapses relative to
/// the design even though the score vanishes.
fn check_information(data: &Dataset, spec: &FirstStageSpec, w: &DMatrix<f64>, gamma: &[f64]) -> Result<()> {
    let info = -spec.score_jacobian(data, gamma)?;
    let gram = w.transpose() * w / data.n() as f64;
    let ratio = info.symmetric_eigenvalues().min() / gram.symmetric_eigenvalues().max();
    if ratio < 1e-6 {
        return Err(Error::Convergence {
            message: "binary first stage is (quasi-)separated".into(),
            last: gamma.to_vec(),
        });
    }
    Ok(())
}

fn newton(data: &Dataset, spec: &FirstStageSpec, w: &DMatrix<f64>) -> Result<(Vec<f64>, usize)> {
    let n = data.n() as f64;
    let p = w.ncols();
    let mut gamma = vec![0.0; p];
    let mut ll = spec.loglik(data, w, &gamma);
    for iter in 0..MAX_ITER {
        let h = spec.score_rows(data, &gamma)?;
        let grad = DVector::from_iterator(p, (0..p).map(|j| h.column(j).sum() / n));
        if grad.amax() < GRAD_TOL {
            check_information(data, spec, w, &gamma)?;
            return Ok((gamma, iter));
        }
        let neg_hess = -spec.score_jacobian(data, &gamma)?;
        let step = match neg_hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = gamma.iter().zip(step.iter()).map(|(g, s)| g + t * s).collect();
            let cand_ll = spec.loglik(data, w, &cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                gamma = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let diverging = gamma.iter().map(|g| g.abs()).fold(0.0, f64::max) > 1e4;
        if !accepted || diverging {
            return Err(Error::Convergence {
                message: "binary first stage did not converge (possible separation)".into(),
                last: gamma,
            });
        }
    }
    Err(Error::Convergence {
        message: format!("binary first stage did not converge in {MAX_ITER} iterations"),
        last: gamma,
    })
}
