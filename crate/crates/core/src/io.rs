//! CSV ingestion and export of survival data sets.
//!
//! Input files are UTF-8 with a mandatory header row. Lines starting with
//! `#` are comments. Every referenced cell must hold a number; empty cells
//! are rejected.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Names of the columns holding each role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub y: String,
    pub delta: String,
    /// Dependent-censoring indicator. When absent, ξ = 1 − Δ.
    pub xi: Option<String>,
    pub z: String,
    pub instrument: String,
    /// Exogenous covariates. `None` takes every column not named elsewhere.
    pub covariates: Option<Vec<String>>,
    /// Known control values (oracle fits).
    pub control: Option<String>,
    /// Competing-risks cause label (0 = independently censored). Replaces
    /// the indicator columns when given.
    pub cause: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            y: "y".into(),
            delta: "delta".into(),
            xi: Some("xi".into()),
            z: "z".into(),
            instrument: "w".into(),
            covariates: None,
            control: None,
            cause: None,
        }
    }
}

/// A parsed file.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub data: Dataset,
    /// Cause labels, when a cause column was mapped.
    pub cause: Option<Vec<u8>>,
}

fn parse_cell(s: &str, col: &str, row: usize) -> Result<f64> {
    let t = s.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Err(Error::Input(format!(
            "row {}: missing value in column '{col}'",
            row + 1
        )));
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        Error::Input(format!(
            "row {}: '{t}' in column '{col}' is not a finite number",
            row + 1
        ))
    })
}

fn parse_flag(v: f64, col: &str, row: usize) -> Result<bool> {
    match v {
        0.0 => Ok(false),
        1.0 => Ok(true),
        _ => Err(Error::Input(format!(
            "row {}: column '{col}' must be 0 or 1, got {v}",
            row + 1
        ))),
    }
}

/// Reads a data set. Raw follow-up times must be positive and are replaced by
/// their logarithm unless `already_log` is set.
pub fn read_csv<R: Read>(input: R, map: &ColumnMap, already_log: bool) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Input("missing header row".into()));
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("column '{name}' not found in header")))
    };
    let uses_indicators = map.cause.is_none();
    let mut mapped: Vec<&str> = vec![&map.y, &map.z, &map.instrument, &map.delta];
    mapped.extend(map.xi.as_deref());
    mapped.extend(map.control.as_deref());
    mapped.extend(map.cause.as_deref());
    let covariates: Vec<String> = match &map.covariates {
        Some(c) => c.clone(),
        None => header
            .iter()
            .filter(|h| !mapped.contains(&h.as_str()))
            .cloned()
            .collect(),
    };
    let idx_y = find(&map.y)?;
    let idx_delta = if uses_indicators { Some(find(&map.delta)?) } else { None };
    let idx_xi = match (&map.xi, uses_indicators) {
        (Some(name), true) => Some(find(name)?),
        _ => None,
    };
    let idx_z = find(&map.z)?;
    let idx_w = find(&map.instrument)?;
    let idx_v = map.control.as_deref().map(find).transpose()?;
    let idx_cause = map.cause.as_deref().map(find).transpose()?;
    let idx_cov = covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let (mut y, mut delta, mut xi, mut z, mut w, mut v, mut cause) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut cov = vec![Vec::new(); idx_cov.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |j: usize| parse_cell(rec.get(j).unwrap_or(""), &header[j], row);
        let t = cell(idx_y)?;
        y.push(if already_log {
            t
        } else if t > 0.0 {
            t.ln()
        } else {
            return Err(Error::Input(format!("row {}: raw time {t} must be positive", row + 1)));
        });
        if let Some(j) = idx_delta {
            let d = parse_flag(cell(j)?, &header[j], row)?;
            delta.push(d);
            xi.push(match idx_xi {
                Some(k) => parse_flag(cell(k)?, &header[k], row)?,
                None => !d,
            });
        }
        if let Some(j) = idx_cause {
            let c = cell(j)?;
            if c.fract() != 0.0 || !(0.0..=255.0).contains(&c) {
                return Err(Error::Input(format!(
                    "row {}: cause label {c} is not a small non-negative integer",
                    row + 1
                )));
            }
            cause.push(c as u8);
        }
        z.push(cell(idx_z)?);
        w.push(cell(idx_w)?);
        if let Some(j) = idx_v {
            v.push(cell(j)?);
        }
        for (col, &j) in cov.iter_mut().zip(&idx_cov) {
            col.push(cell(j)?);
        }
    }
    if y.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }
    if !uses_indicators {
        delta = cause.iter().map(|&c| c == 1).collect();
        xi = cause.iter().map(|&c| c == 2).collect();
    }
    let mut data = Dataset::new(y, delta, xi, &cov, w, z)?.with_names(covariates)?;
    if idx_v.is_some() {
        data = data.with_control(v)?;
    }
    Ok(Ingested {
        data,
        cause: idx_cause.map(|_| cause),
    })
}

/// Shortest round-trip representation, in scientific notation for very
/// small or large magnitudes.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `data` with columns `y, delta, xi, <covariates>, w, z`, followed by
/// `cause` when labels are given. `y` is written on the log scale.
pub fn write_csv<W: Write>(out: W, data: &Dataset, cause: Option<&[u8]>) -> Result<()> {
    if cause.is_some_and(|c| c.len() != data.n()) {
        return Err(Error::Input("cause column length mismatch".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y".to_string(), "delta".into(), "xi".into()];
    header.extend(data.covariate_names.iter().cloned());
    header.extend(["w".to_string(), "z".into()]);
    if cause.is_some() {
        header.push("cause".into());
    }
    w.write_record(&header)?;
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    for i in 0..data.n() {
        let mut rec = vec![num(data.y[i]), flag(data.delta[i]), flag(data.xi[i])];
        rec.extend(data.x_row(i)[1..].iter().map(|&v| num(v)));
        rec.push(num(data.w_tilde[i]));
        rec.push(num(data.z[i]));
        if let Some(c) = cause {
            rec.push(c[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes named numeric columns of equal length.
pub fn write_columns<W: Write>(out: W, columns: &[(&str, &[f64])]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.1.len());
    if columns.iter().any(|c| c.1.len() != n) {
        return Err(Error::Input("column length mismatch".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns.iter().map(|c| c.0))?;
    for i in 0..n {
        w.write_record(columns.iter().map(|c| num(c.1[i])))?;
    }
    w.flush()?;
    Ok(())
}
