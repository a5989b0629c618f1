//! Simulation designs, replication studies and their summary metrics.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmprsk::{fit_cmprsk, marginal_cif, nonparametric_cif, CmprskData, CmprskFitConfig, CmprskParams};
use crate::data::Dataset;
use crate::dist::rng::{self, SimRng, SkewNormal};
use crate::dist::{norm_log_cdf, norm_log_pdf, norm_log_sf, Corr, CovMatrix};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitConfig, FitResult, Variant};
use crate::firststage::{logistic_lower_mean, logistic_upper_mean, FirstStageKind, FirstStageSpec};
use crate::likelihood::EtaParams;
use crate::quad::integrate_adaptive;
use crate::transform::{yj_inv, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Binary Z with logistic ν, normal errors.
    Baseline,
    /// Binary Z with standard normal ν.
    LinkProbit,
    /// Binary Z with standard Gumbel ν.
    LinkCloglog,
    /// Continuous Z, skew-normal errors.
    SkewNormal,
    /// Continuous Z, bivariate t errors with 3 degrees of freedom.
    StudentT3,
    /// Continuous Z, error scale exp(c·X̃).
    Heteroscedastic,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Baseline,
        Scenario::LinkProbit,
        Scenario::LinkCloglog,
        Scenario::SkewNormal,
        Scenario::StudentT3,
        Scenario::Heteroscedastic,
    ];

    pub fn binary_treatment(self) -> bool {
        matches!(self, Scenario::Baseline | Scenario::LinkProbit | Scenario::LinkCloglog)
    }

    /// First stage that an analyst would fit (always the logit link for binary Z).
    pub fn first_stage(self) -> FirstStageSpec {
        if self.binary_treatment() {
            FirstStageSpec::new(FirstStageKind::BinaryLogit)
        } else {
            FirstStageSpec::new(FirstStageKind::ContinuousLinear)
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::LinkProbit => "1-a",
            Scenario::LinkCloglog => "1-b",
            Scenario::SkewNormal => "2-a",
            Scenario::StudentT3 => "2-b",
            Scenario::Heteroscedastic => "2-c",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdminSpec {
    None,
    Uniform { a_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub truth: EtaParams,
    pub gamma: Vec<f64>,
    pub admin: AdminSpec,
    /// Heteroscedasticity strength c in sd · exp(c·X̃).
    pub hetero: f64,
    pub seed: u64,
}

/// Default structural parameters with (σ_T, σ_C, ρ) = (1, 1, 0.75).
pub fn default_truth() -> EtaParams {
    EtaParams {
        beta_t: vec![2.5, 2.6],
        alpha_t: 1.8,
        lambda_t: 2.0,
        beta_c: vec![1.8, 0.9],
        alpha_c: 0.5,
        lambda_c: -2.2,
        sigma_t: 1.0,
        sigma_c: 1.0,
        rho: Corr::new(0.75).expect("valid"),
        theta1: Theta::new(1.0).expect("valid"),
        theta2: Theta::new(0.5).expect("valid"),
    }
}

pub const DEFAULT_GAMMA: [f64; 3] = [-1.0, 0.6, 2.3];

impl DgpSpec {
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> Self {
        DgpSpec {
            scenario,
            n,
            truth: default_truth(),
            gamma: DEFAULT_GAMMA.to_vec(),
            admin: AdminSpec::Uniform { a_max: 8.0 },
            hetero: 0.3,
            seed,
        }
    }

    pub fn baseline(n: usize, seed: u64) -> Self {
        Self::new(Scenario::Baseline, n, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DgpSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::Input("simulated samples need n ≥ 50".into()));
        }
        self.truth.validate()?;
        if self.truth.p() != 2 || self.gamma.len() != 3 {
            return Err(Error::Input(
                "designs use one covariate: beta of length 2, gamma of length 3".into(),
            ));
        }
        if let AdminSpec::Uniform { a_max } = self.admin {
            if !(a_max > 0.0 && a_max.is_finite()) {
                return Err(Error::Input("a_max must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

/// Latent quantities hidden from the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub v: Vec<f64>,
    pub t: Vec<f64>,
    pub c: Vec<f64>,
    pub a: Vec<f64>,
    pub eps_t: Vec<f64>,
    pub eps_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: Dataset,
    pub latent: Latent,
}

impl Simulated {
    /// The data set with the true control values exposed (oracle use only).
    pub fn oracle_data(&self) -> Dataset {
        let mut d = self.data.clone();
        d.control = Some(self.latent.v.clone());
        d
    }
}

/// E[ν | ν < c] and E[ν | ν > c] for a standard (maximum) Gumbel ν.
pub fn gumbel_truncated_means(c: f64) -> (f64, f64) {
    let dens = |x: f64| (-x - (-x).exp()).exp();
    let lo = (-8.0f64).min(c - 1.0);
    let hi = c.max(0.0) + 60.0;
    let below = |f: &dyn Fn(f64) -> f64| integrate_adaptive(f, lo, c, 1e-300, 1e-12).unwrap_or(0.0);
    let above = |f: &dyn Fn(f64) -> f64| integrate_adaptive(f, c, hi, 1e-300, 1e-12).unwrap_or(0.0);
    let m_lo = below(&dens);
    let m_hi = above(&dens);
    let x_lo = below(&|x| (x - c) * dens(x));
    let x_hi = above(&|x| (x - c) * dens(x));
    let lower = if m_lo > 0.0 { c + x_lo / m_lo } else { c };
    let upper = if m_hi > 0.0 { c + x_hi / m_hi } else { c };
    (lower, upper)
}

fn binary_control(scenario: Scenario, c: f64, z: bool) -> f64 {
    match scenario {
        Scenario::LinkProbit => {
            if z {
                -(norm_log_pdf(c) - norm_log_cdf(c)).exp()
            } else {
                (norm_log_pdf(c) - norm_log_sf(c)).exp()
            }
        }
        Scenario::LinkCloglog => {
            // ν = −G with G standard (maximum) Gumbel, so P(ν < c) = 1 − exp(−e^c)
            let (lower, upper) = gumbel_truncated_means(-c);
            if z {
                -upper
            } else {
                -lower
            }
        }
        _ => {
            if z {
                logistic_lower_mean(c)
            } else {
                logistic_upper_mean(c)
            }
        }
    }
}

struct ErrorDraw {
    skew: Option<SkewNormal>,
    scale: Option<CovMatrix>,
}

impl ErrorDraw {
    fn new(spec: &DgpSpec) -> Result<Self> {
        let t = &spec.truth;
        Ok(ErrorDraw {
            skew: match spec.scenario {
                Scenario::SkewNormal => Some(SkewNormal::with_skewness(0.92)?),
                _ => None,
            },
            scale: match spec.scenario {
                Scenario::StudentT3 => Some(CovMatrix::from_sd_corr(&[t.sigma_t, t.sigma_c], &[t.rho.value()])?),
                _ => None,
            },
        })
    }

    fn draw(&self, spec: &DgpSpec, r: &mut SimRng, x: f64) -> Result<(f64, f64)> {
        let t = &spec.truth;
        let rho = t.rho.value();
        match spec.scenario {
            Scenario::SkewNormal => self
                .skew
                .as_ref()
                .expect("built")
                .sample_pair(r, (t.sigma_t, t.sigma_c), rho),
            Scenario::StudentT3 => rng::bivariate_t(r, 3.0, self.scale.as_ref().expect("built")),
            Scenario::Heteroscedastic => {
                let f = (spec.hetero * x).exp();
                Ok(rng::bivariate_normal(r, t.sigma_t * f, t.sigma_c * f, rho))
            }
            _ => Ok(rng::bivariate_normal(r, t.sigma_t, t.sigma_c, rho)),
        }
    }
}

/// Draws one data set from the design.
pub fn generate(spec: &DgpSpec) -> Result<Simulated> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, &[0x5eed]);
    let errs = ErrorDraw::new(spec)?;
    let n = spec.n;
    let g = &spec.gamma;
    let eta = &spec.truth;
    let (mut xs, mut ws, mut zs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut lat = Latent {
        v: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        eps_t: Vec::with_capacity(n),
        eps_c: Vec::with_capacity(n),
    };
    let (mut y, mut delta, mut xi) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let x = rng::normal(&mut r, 0.0, 1.0);
        let w = match spec.scenario {
            Scenario::Baseline => (r.random::<f64>() < 0.5) as u8 as f64,
            _ => rng::uniform(&mut r, 0.0, 2.0),
        };
        let c = g[0] + g[1] * x + g[2] * w;
        let (z, v) = if spec.scenario.binary_treatment() {
            let nu = match spec.scenario {
                Scenario::LinkProbit => rng::normal(&mut r, 0.0, 1.0),
                Scenario::LinkCloglog => -rng::gumbel(&mut r),
                _ => rng::logistic(&mut r),
            };
            let z = c > nu;
            (z as u8 as f64, binary_control(spec.scenario, c, z))
        } else {
            let nu = rng::normal(&mut r, 0.0, std::f64::consts::SQRT_2);
            (c + nu, nu)
        };
        let (et, ec) = errs.draw(spec, &mut r, x)?;
        let (tau_t, tau_c) = eta.location(&[1.0, x], z, v);
        let t = yj_inv(eta.theta1.value(), tau_t + et);
        let cc = yj_inv(eta.theta2.value(), tau_c + ec);
        let a = match spec.admin {
            AdminSpec::None => f64::INFINITY,
            AdminSpec::Uniform { a_max } => rng::uniform(&mut r, 0.0, a_max),
        };
        let obs = t.min(cc).min(a);
        y.push(obs);
        delta.push(t <= cc && t <= a);
        xi.push(cc < t && cc <= a);
        xs.push(x);
        ws.push(w);
        zs.push(z);
        lat.v.push(v);
        lat.t.push(t);
        lat.c.push(cc);
        lat.a.push(a);
        lat.eps_t.push(et);
        lat.eps_c.push(ec);
    }
    let data = Dataset::new(y, delta, xi, &[xs], ws, zs)?;
    Ok(Simulated { data, latent: lat })
}

/// Finds a_max so that the expected administrative share equals `target`,
/// using a pilot sample of size `pilot` drawn with the spec's seed.
pub fn calibrate_admin(spec: &DgpSpec, target: f64, pilot: usize) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Input("target share must lie in (0, 1)".into()));
    }
    let base = DgpSpec {
        n: pilot,
        admin: AdminSpec::None,
        ..spec.clone()
    };
    let sim = generate(&base)?;
    let m: Vec<f64> = sim.latent.t.iter().zip(&sim.latent.c).map(|(t, c)| t.min(*c)).collect();
    // P(A < min(T, C)) for A ~ U[0, a]
    let share = |a: f64| m.iter().map(|&v| (v.max(0.0) / a).min(1.0)).sum::<f64>() / m.len() as f64;
    let (mut lo, mut hi) = (1e-6, 1e6);
    if share(lo) < target {
        return Err(Error::Input(format!("administrative share {target} is not attainable")));
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if share(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Fraction of (events, dependent censorings, administrative censorings).
pub fn outcome_shares(data: &Dataset) -> (f64, f64, f64) {
    let (e, c, a) = data.outcome_counts();
    let n = data.n() as f64;
    (e as f64 / n, c as f64 / n, a as f64 / n)
}

/// Summary of one parameter under one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub esd: f64,
    pub rmse: f64,
    /// Coverage ratio of the confidence intervals, when available.
    pub cr: Option<f64>,
    pub n_ci: usize,
}

impl MetricCell {
    /// Bias, ESD (N−1 denominator), RMSE (N denominator) and coverage.
    pub fn compute(parameter: &str, truth: f64, estimates: &[f64], cis: &[(f64, f64)]) -> Self {
        let n = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / n;
        let esd = if estimates.len() > 1 {
            (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let rmse = (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n).sqrt();
        let cr = if cis.is_empty() {
            None
        } else {
            Some(cis.iter().filter(|(l, u)| *l <= truth && truth <= *u).count() as f64 / cis.len() as f64)
        };
        MetricCell {
            parameter: parameter.to_string(),
            truth,
            mean,
            bias: mean - truth,
            esd,
            rmse,
            cr,
            n_ci: cis.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub successes: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub cells: Vec<MetricCell>,
}

impl VariantReport {
    pub fn cell(&self, parameter: &str) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.parameter == parameter)
    }

    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / (self.successes + self.failures).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub spec: DgpSpec,
    pub replications: usize,
    pub variants: Vec<VariantReport>,
    /// Per-replication estimates in flat η order, by variant (failed runs omitted).
    #[serde(skip)]
    pub raw: Vec<Vec<Vec<f64>>>,
}

impl ReplicationReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// One CSV row per parameter × estimator.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "variant",
            "parameter",
            "truth",
            "mean",
            "bias",
            "esd",
            "rmse",
            "cr",
            "successes",
            "failures",
        ])?;
        for vr in &self.variants {
            let variant = serde_json::to_value(vr.variant)?
                .as_str()
                .unwrap_or_default()
                .to_string();
            for c in &vr.cells {
                w.write_record([
                    variant.clone(),
                    c.parameter.clone(),
                    c.truth.to_string(),
                    c.mean.to_string(),
                    c.bias.to_string(),
                    c.esd.to_string(),
                    c.rmse.to_string(),
                    c.cr.map(|v| v.to_string()).unwrap_or_default(),
                    vr.successes.to_string(),
                    vr.failures.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `replications` generate-and-fit cycles for each configuration.
/// Replication r uses seed stream (spec.seed, r); results do not depend on
/// the number of threads.
pub fn replicate(
    spec: &DgpSpec,
    configs: &[FitConfig],
    replications: usize,
    threads: usize,
) -> Result<ReplicationReport> {
    if replications < 2 {
        return Err(Error::Input("need at least 2 replications".into()));
    }
    if configs.is_empty() {
        return Err(Error::Input("no estimator configured".into()));
    }
    spec.validate()?;
    let first_stage = spec.scenario.first_stage();
    let run = |r: usize| -> Vec<std::result::Result<FitResult, String>> {
        let s = spec.with_seed(rng::stream_key(spec.seed, &[r as u64]));
        match generate(&s) {
            Ok(sim) => configs
                .iter()
                .map(|cfg| {
                    let data = if cfg.variant == Variant::Oracle {
                        sim.oracle_data()
                    } else {
                        sim.data.clone()
                    };
                    fit(&data, &first_stage, cfg).map_err(|e| e.to_string())
                })
                .collect(),
            Err(e) => configs.iter().map(|_| Err(e.to_string())).collect(),
        }
    };
    let results: Vec<_> = with_pool(threads, || (0..replications).into_par_iter().map(run).collect())?;

    let truth = spec.truth.to_vec();
    let mut variants = Vec::with_capacity(configs.len());
    let mut raw = Vec::with_capacity(configs.len());
    for (k, cfg) in configs.iter().enumerate() {
        let mut ests: Vec<Vec<f64>> = vec![];
        let mut cis: Vec<Vec<Option<(f64, f64)>>> = vec![];
        let mut failures = vec![];
        let mut names = vec![];
        let mut free = vec![];
        for rep in &results {
            match &rep[k] {
                Ok(f) => {
                    ests.push(f.eta_hat.to_vec());
                    cis.push(f.estimates.iter().map(|e| e.ci).collect());
                    names = f.names.clone();
                    free = f.free.clone();
                }
                Err(e) => failures.push(e.clone()),
            }
        }
        let cells = free
            .iter()
            .map(|&i| {
                let col: Vec<f64> = ests.iter().map(|e| e[i]).collect();
                let ci: Vec<(f64, f64)> = cis.iter().filter_map(|c| c[i]).collect();
                MetricCell::compute(&names[i], truth[i], &col, &ci)
            })
            .collect();
        variants.push(VariantReport {
            variant: cfg.variant,
            successes: ests.len(),
            failures: failures.len(),
            failure_messages: failures,
            cells,
        });
        raw.push(ests);
    }
    Ok(ReplicationReport {
        spec: spec.clone(),
        replications,
        variants,
        raw,
    })
}

/// Competing-risks design with two competing events and one dependent
/// censoring time; covariates, instrument and treatment as in the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmprskDgpSpec {
    pub n: usize,
    pub truth: CmprskParams,
    pub gamma: Vec<f64>,
    pub admin: AdminSpec,
    pub seed: u64,
}

/// Structural parameters of the competing-risks design.
pub fn cmprsk_default_truth() -> CmprskParams {
    CmprskParams {
        k: 2,
        beta: vec![vec![2.0, 0.8], vec![2.2, -0.5], vec![2.4, 0.4]],
        alpha: vec![1.2, -0.6, 0.3],
        lambda: vec![1.5, -1.0, 0.8],
        theta: [1.0, 0.7, 1.2].map(|t| Theta::new(t).expect("valid")).to_vec(),
        sigma: CovMatrix::from_sd_corr(&[1.0, 1.2, 1.0], &[0.3, 0.5, 0.2]).expect("valid"),
    }
}

impl CmprskDgpSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        CmprskDgpSpec {
            n,
            truth: cmprsk_default_truth(),
            gamma: DEFAULT_GAMMA.to_vec(),
            admin: AdminSpec::Uniform { a_max: CMPRSK_A_MAX },
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        CmprskDgpSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.truth.p() != 2 || self.gamma.len() != 3 {
            return Err(Error::Input("the design has one covariate and one instrument".into()));
        }
        if self.n < 10 {
            return Err(Error::Input("sample size must be at least 10".into()));
        }
        if let AdminSpec::Uniform { a_max } = self.admin {
            if !(a_max > 0.0) {
                return Err(Error::Input("a_max must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Upper end of the uniform independent censoring law of the design.
pub const CMPRSK_A_MAX: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CmprskSimulated {
    /// Observed data, with the true control values attached to `base`.
    pub data: CmprskData,
    /// Latent times per row.
    pub latent: Vec<Vec<f64>>,
}

/// Draws one competing-risks data set.
pub fn generate_cmprsk(spec: &CmprskDgpSpec) -> Result<CmprskSimulated> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, &[0xc1f]);
    let truth = &spec.truth;
    let k = truth.r();
    let l = truth.sigma.cholesky_lower();
    let g = &spec.gamma;
    let n = spec.n;
    let (mut xs, mut ws, mut zs, mut vs) = (vec![], vec![], vec![], vec![]);
    let (mut y, mut cause, mut latent) = (vec![], vec![], vec![]);
    for _ in 0..n {
        let x = rng::normal(&mut r, 0.0, 1.0);
        let w = (r.random::<f64>() < 0.5) as u8 as f64;
        let c = g[0] + g[1] * x + g[2] * w;
        let z = c > rng::logistic(&mut r);
        let v = binary_control(Scenario::Baseline, c, z);
        let z = z as u8 as f64;
        let e = rng::mvn(&mut r, &l);
        let tau = truth.location(&[1.0, x], z, v);
        let t: Vec<f64> = (0..k).map(|j| yj_inv(truth.theta[j].value(), tau[j] + e[j])).collect();
        let a = match spec.admin {
            AdminSpec::None => f64::INFINITY,
            AdminSpec::Uniform { a_max } => rng::uniform(&mut r, 0.0, a_max),
        };
        let (j, tmin) = t
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, &t)| (j, t))
            .expect("r ≥ 2");
        if a < tmin {
            y.push(a);
            cause.push(0);
        } else {
            y.push(tmin);
            cause.push(j as u8 + 1);
        }
        xs.push(x);
        ws.push(w);
        zs.push(z);
        vs.push(v);
        latent.push(t);
    }
    let base = Dataset::new(y, vec![false; n], vec![false; n], &[xs], ws, zs)?.with_control(vs)?;
    Ok(CmprskSimulated {
        data: CmprskData::new(base, cause, k, truth.k)?,
        latent,
    })
}

/// Pointwise mean and RMSE of estimated CIF curves, with the global RMSE
/// ∫_1^{t_max} RMSE(t) dt by the trapezoidal rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CifMetrics {
    pub grid: Vec<f64>,
    pub expected: Vec<f64>,
    pub mean: Vec<f64>,
    pub rmse: Vec<f64>,
    pub global: f64,
    pub replications: usize,
}

pub fn cif_metrics(expected: &[f64], estimated: &[Vec<f64>], grid: &[f64], t_max: f64) -> Result<CifMetrics> {
    let g = grid.len();
    if g < 2 || expected.len() != g || estimated.iter().any(|e| e.len() != g) {
        return Err(Error::Input("curves must match the time grid".into()));
    }
    if estimated.is_empty() {
        return Err(Error::Input("no estimated curves".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Input("time grid must be strictly increasing".into()));
    }
    if !(grid[0] <= 1.0 && t_max > 1.0 && t_max <= grid[g - 1]) {
        return Err(Error::Input("the grid must cover [1, t_max]".into()));
    }
    let n = estimated.len() as f64;
    let mean: Vec<f64> = (0..g)
        .map(|i| estimated.iter().map(|e| e[i]).sum::<f64>() / n)
        .collect();
    let rmse: Vec<f64> = (0..g)
        .map(|i| (estimated.iter().map(|e| (e[i] - expected[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let at = |t: f64| {
        let i = grid.partition_point(|&s| s <= t).clamp(1, g - 1);
        let (a, b) = (grid[i - 1], grid[i]);
        rmse[i - 1] + (rmse[i] - rmse[i - 1]) * (t - a) / (b - a)
    };
    let mut knots = vec![1.0];
    knots.extend(grid.iter().copied().filter(|&t| t > 1.0 && t < t_max));
    knots.push(t_max);
    let global = knots
        .windows(2)
        .map(|w| 0.5 * (at(w[0]) + at(w[1])) * (w[1] - w[0]))
        .sum();
    Ok(CifMetrics {
        grid: grid.to_vec(),
        expected: expected.to_vec(),
        mean,
        rmse,
        global,
        replications: estimated.len(),
    })
}

/// CIF comparison of the two-step, naive and nonparametric estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmprskReplication {
    pub spec: CmprskDgpSpec,
    pub t_max: f64,
    /// Metrics per competing cause (index 0 is cause 1).
    pub two_step: Vec<CifMetrics>,
    pub naive: Vec<CifMetrics>,
    pub nonparametric: Vec<CifMetrics>,
    /// Failed replications of the two-step, naive and nonparametric estimators.
    pub failures: [usize; 3],
    pub failure_messages: Vec<String>,
}

/// Size of the fixed covariate sample over which model-based CIFs are averaged.
pub const CIF_REFERENCE_ROWS: usize = 1000;

/// Replicates the competing-risks design. Model-based CIFs are averaged
/// over a fixed reference sample of covariates drawn from the design; the
/// expected CIF uses the true parameters and control values there.
pub fn replicate_cmprsk(
    spec: &CmprskDgpSpec,
    replications: usize,
    grid: &[f64],
    t_max: f64,
    threads: usize,
) -> Result<CmprskReplication> {
    if replications < 2 {
        return Err(Error::Input("need at least 2 replications".into()));
    }
    let k = spec.truth.k;
    let fs_spec = FirstStageSpec::new(FirstStageKind::BinaryLogit);
    let reference = generate_cmprsk(&CmprskDgpSpec {
        n: CIF_REFERENCE_ROWS,
        ..spec.with_seed(rng::stream_key(spec.seed, &[u64::MAX]))
    })?
    .data
    .base;
    let v_ref = reference.control.clone().expect("simulated");
    let expected: Vec<Vec<f64>> = (1..=k)
        .map(|j| marginal_cif(&spec.truth, j, grid, &reference, &v_ref))
        .collect::<Result<_>>()?;

    type Curves = Vec<Vec<f64>>;
    let run = |rep: usize| -> [std::result::Result<Curves, String>; 3] {
        let sim = match generate_cmprsk(&spec.with_seed(rng::stream_key(spec.seed, &[rep as u64]))) {
            Ok(s) => s,
            Err(e) => return [Err(e.to_string()), Err(e.to_string()), Err(e.to_string())],
        };
        let d = &sim.data;
        let model = |variant: Variant| -> Result<Curves> {
            let mut cfg = CmprskFitConfig::new(variant);
            cfg.compute_vcov = false;
            let f = fit_cmprsk(d, &fs_spec, &cfg)?;
            let v = match variant {
                Variant::Naive => vec![0.0; reference.n()],
                _ => fs_spec.control_values(&reference, &f.gamma_hat)?,
            };
            (1..=k)
                .map(|j| marginal_cif(&f.params, j, grid, &reference, &v))
                .collect()
        };
        let nonparametric = || -> Result<Curves> {
            let labels: Vec<u8> = d.cause.iter().map(|&c| if c as usize > k { 0 } else { c }).collect();
            let np = nonparametric_cif(&d.base.y, &labels, k)?;
            Ok((1..=k).map(|j| grid.iter().map(|&t| np.at(j, t)).collect()).collect())
        };
        [model(Variant::TwoStep), model(Variant::Naive), nonparametric()].map(|r| r.map_err(|e| e.to_string()))
    };
    let results: Vec<[std::result::Result<Curves, String>; 3]> =
        with_pool(threads, || (0..replications).into_par_iter().map(run).collect())?;
    let mut curves: [Vec<Curves>; 3] = [vec![], vec![], vec![]];
    let mut failures = [0usize; 3];
    let mut failure_messages = vec![];
    for rep in results {
        for (e, r) in rep.into_iter().enumerate() {
            match r {
                Ok(c) => curves[e].push(c),
                Err(m) => {
                    failures[e] += 1;
                    failure_messages.push(m);
                }
            }
        }
    }
    if curves.iter().any(|c| c.len() < 2) {
        return Err(Error::Estimation(
            "fewer than 2 successful replications for an estimator".into(),
        ));
    }
    let metrics = |c: &Vec<Curves>| -> Result<Vec<CifMetrics>> {
        (0..k)
            .map(|j| {
                let est: Vec<Vec<f64>> = c.iter().map(|rep| rep[j].clone()).collect();
                cif_metrics(&expected[j], &est, grid, t_max)
            })
            .collect()
    };
    Ok(CmprskReplication {
        spec: spec.clone(),
        t_max,
        two_step: metrics(&curves[0])?,
        naive: metrics(&curves[1])?,
        nonparametric: metrics(&curves[2])?,
        failures,
        failure_messages,
    })
}

/// Runs `f` on a dedicated rayon pool with `threads` workers (0 = rayon default).
pub fn with_pool<T: Send, F: FnOnce() -> T + Send>(threads: usize, f: F) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Input(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let s = DgpSpec::baseline(200, 42);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a, b);
        let c = generate(&s.with_seed(43)).unwrap();
        assert_ne!(a.data.y, c.data.y);
        for i in 0..200 {
            let k =
                a.data.delta[i] as u8 + a.data.xi[i] as u8 + (a.data.outcome(i) == crate::data::Outcome::Admin) as u8;
            assert_eq!(k, 1);
        }
    }

    #[test]
    fn gumbel_means_match_quadrature_identity() {
        let euler = 0.577_215_664_901_532_9;
        for &c in &[-2.0, -0.5, 0.0, 1.0, 3.0] {
            let (lo, hi) = gumbel_truncated_means(c);
            let f = (-(-c as f64).exp()).exp();
            assert!((f * lo + (1.0 - f) * hi - euler).abs() < 1e-9, "c={c}");
            assert!(lo < c && hi > c);
        }
    }

    #[test]
    fn gumbel_means_match_monte_carlo() {
        let mut r = rng::stream(2, &[]);
        let c = 0.4;
        let (mut s, mut k) = (0.0, 0usize);
        for _ in 0..400_000 {
            let g = rng::gumbel(&mut r);
            if g < c {
                s += g;
                k += 1;
            }
        }
        let (lo, _) = gumbel_truncated_means(c);
        assert!((s / k as f64 - lo).abs() < 4.0 * 0.6 / (k as f64).sqrt());
    }

    #[test]
    fn every_scenario_generates() {
        for sc in Scenario::ALL {
            let sim = generate(&DgpSpec::new(sc, 500, 1)).unwrap();
            let (e, c, a) = outcome_shares(&sim.data);
            assert!(e > 0.05 && c > 0.05 && a > 0.01, "{sc:?}: {e} {c} {a}");
            assert!(sim.data.y.iter().all(|y| y.is_finite()));
        }
    }

    #[test]
    fn heteroscedastic_scale_tracks_covariate() {
        let sim = generate(&DgpSpec::new(Scenario::Heteroscedastic, 20_000, 3)).unwrap();
        let x = sim.data.covariate(0);
        let abs_e: Vec<f64> = sim.latent.eps_t.iter().map(|e| e.abs()).collect();
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let me = abs_e.iter().sum::<f64>() / x.len() as f64;
        let cov: f64 = x.iter().zip(&abs_e).map(|(a, b)| (a - mx) * (b - me)).sum::<f64>();
        assert!(cov > 0.0);
    }

    #[test]
    fn metric_identities() {
        let c = MetricCell::compute("a", 1.0, &[2.0; 10], &[(0.0, 3.0); 10]);
        assert_eq!(c.esd, 0.0);
        assert!((c.rmse - 1.0).abs() < 1e-15);
        assert_eq!(c.cr, Some(1.0));
        let est = [0.3, 1.7, 0.9, 1.2, 2.5, -0.4];
        let c = MetricCell::compute("b", 1.1, &est, &[]);
        let n = est.len() as f64;
        assert!((c.rmse.powi(2) - (c.bias.powi(2) + (n - 1.0) / n * c.esd.powi(2))).abs() < 1e-12);
        assert_eq!(c.cr, None);
    }

    #[test]
    fn admin_calibration_hits_target() {
        let spec = DgpSpec::baseline(40_000, 9);
        let a = calibrate_admin(&spec, 0.2, 40_000).unwrap();
        let sim = generate(&DgpSpec {
            admin: AdminSpec::Uniform { a_max: a },
            ..spec.with_seed(10)
        })
        .unwrap();
        let (_, _, s) = outcome_shares(&sim.data);
        assert!((s - 0.2).abs() < 0.01, "share {s} at a_max {a}");
    }
}
