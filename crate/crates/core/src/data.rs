//! Observed survival data in column form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which time was observed for a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Event,
    Censored,
    Admin,
}

/// One subject: log follow-up time `y`, indicators Δ = 1(Y = T) and
/// ξ = 1(Y = C), covariate row `x = (1, X̃)`, instrument, treatment and
/// control value.
#[derive(Debug, Clone, Copy)]
pub struct ObservedRecord<'a> {
    pub y: f64,
    pub delta: bool,
    pub xi: bool,
    pub x: &'a [f64],
    pub w_tilde: f64,
    pub z: f64,
    pub v: f64,
}

impl ObservedRecord<'_> {
    pub fn outcome(&self) -> Outcome {
        match (self.delta, self.xi) {
            (true, _) => Outcome::Event,
            (false, true) => Outcome::Censored,
            _ => Outcome::Admin,
        }
    }
}

/// Column-oriented sample. `x` is row-major with an intercept column first,
/// so each row has `p_x() = m + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub delta: Vec<bool>,
    pub xi: Vec<bool>,
    x: Vec<f64>,
    pub w_tilde: Vec<f64>,
    pub z: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// Known control values, when available (simulated data).
    pub control: Option<Vec<f64>>,
}

impl Dataset {
    /// `covariates` holds the m columns of X̃ (without intercept).
    pub fn new(
        y: Vec<f64>,
        delta: Vec<bool>,
        xi: Vec<bool>,
        covariates: &[Vec<f64>],
        w_tilde: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if delta.len() != n || xi.len() != n || w_tilde.len() != n || z.len() != n {
            return Err(Error::Input("all columns must have the same length".into()));
        }
        if covariates.iter().any(|c| c.len() != n) {
            return Err(Error::Input("covariate column length mismatch".into()));
        }
        let m = covariates.len();
        let mut x = Vec::with_capacity(n * (m + 1));
        for i in 0..n {
            x.push(1.0);
            x.extend(covariates.iter().map(|c| c[i]));
        }
        let names = (1..=m).map(|j| format!("x{j}")).collect();
        let d = Dataset {
            y,
            delta,
            xi,
            x,
            w_tilde,
            z,
            covariate_names: names,
            control: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_control(mut self, v: Vec<f64>) -> Result<Self> {
        if v.len() != self.n() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(
                "control column must be finite with one value per row".into(),
            ));
        }
        self.control = Some(v);
        Ok(self)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.m() {
            return Err(Error::Input("covariate name count mismatch".into()));
        }
        self.covariate_names = names;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n() {
            if !self.y[i].is_finite() {
                return Err(Error::Input(format!("row {i}: follow-up time must be finite")));
            }
            if self.delta[i] && self.xi[i] {
                return Err(Error::Input(format!("row {i}: delta and xi both set")));
            }
            if !self.z[i].is_finite() || !self.w_tilde[i].is_finite() {
                return Err(Error::Input(format!("row {i}: non-finite treatment or instrument")));
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite covariate".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of covariates m (excluding intercept).
    pub fn m(&self) -> usize {
        if self.n() == 0 {
            self.covariate_names.len()
        } else {
            self.x.len() / self.n() - 1
        }
    }

    pub fn p_x(&self) -> usize {
        self.m() + 1
    }

    /// Row `(1, X̃_i)`.
    pub fn x_row(&self, i: usize) -> &[f64] {
        let p = self.p_x();
        &self.x[i * p..(i + 1) * p]
    }

    /// Row `W_i = (1, X̃_i, W̃_i)`.
    pub fn w_row(&self, i: usize) -> Vec<f64> {
        let mut w = self.x_row(i).to_vec();
        w.push(self.w_tilde[i]);
        w
    }

    /// Covariate column j of X̃ (0-based, intercept excluded).
    pub fn covariate(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x_row(i)[j + 1]).collect()
    }

    pub fn record<'a>(&'a self, i: usize, v: &[f64]) -> ObservedRecord<'a> {
        ObservedRecord {
            y: self.y[i],
            delta: self.delta[i],
            xi: self.xi[i],
            x: self.x_row(i),
            w_tilde: self.w_tilde[i],
            z: self.z[i],
            v: v[i],
        }
    }

    pub fn outcome(&self, i: usize) -> Outcome {
        match (self.delta[i], self.xi[i]) {
            (true, _) => Outcome::Event,
            (false, true) => Outcome::Censored,
            _ => Outcome::Admin,
        }
    }

    /// Counts of (events, dependent censorings, administrative censorings).
    pub fn outcome_counts(&self) -> (usize, usize, usize) {
        let e = self.delta.iter().filter(|&&d| d).count();
        let c = self.xi.iter().filter(|&&d| d).count();
        (e, c, self.n() - e - c)
    }

    pub fn has_admin_censoring(&self) -> bool {
        self.outcome_counts().2 > 0
    }

    /// Same covariates with replaced outcomes.
    pub fn with_outcomes(&self, y: Vec<f64>, delta: Vec<bool>, xi: Vec<bool>) -> Result<Self> {
        if y.len() != self.n() || delta.len() != self.n() || xi.len() != self.n() {
            return Err(Error::Input("outcome length mismatch".into()));
        }
        let d = Dataset {
            y,
            delta,
            xi,
            ..self.clone()
        };
        d.validate()?;
        Ok(d)
    }

    /// Rows selected by index (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Self {
        let p = self.p_x();
        let mut x = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        Dataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            delta: idx.iter().map(|&i| self.delta[i]).collect(),
            xi: idx.iter().map(|&i| self.xi[i]).collect(),
            x,
            w_tilde: idx.iter().map(|&i| self.w_tilde[i]).collect(),
            z: idx.iter().map(|&i| self.z[i]).collect(),
            covariate_names: self.covariate_names.clone(),
            control: self.control.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Rescales covariate column j (intercept excluded).
    pub fn scale_covariate(&mut self, j: usize, factor: f64) {
        let p = self.p_x();
        for i in 0..self.n() {
            self.x[i * p + j + 1] *= factor;
        }
    }
}
