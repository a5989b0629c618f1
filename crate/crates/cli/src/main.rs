use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use cfsurv::cmprsk::{cif_curve, fit_cmprsk, marginal_cif, nonparametric_cif, CmprskData, CmprskFitConfig};
use cfsurv::estimator::{fit, FitConfig, ThetaMode, Variant};
use cfsurv::firststage::{FirstStageKind, FirstStageSpec};
use cfsurv::gof::{bootstrap_gof, GofConfig};
use cfsurv::io::{num, read_csv, write_columns, write_csv, ColumnMap, Ingested};
use cfsurv::simkit::{
    generate, generate_cmprsk, replicate, replicate_cmprsk, AdminSpec, CmprskDgpSpec, DgpSpec, Scenario,
};
use cfsurv::Error;

#[derive(Parser, Serialize)]
#[command(
    name = "cfsurv",
    version,
    about = "Control-function survival models with dependent censoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Fit the model and report estimates, standard errors and intervals.
    Fit(FitArgs),
    /// Bootstrap goodness-of-fit test of a fitted model.
    Gof(GofArgs),
    /// Simulate a data set from one of the built-in designs.
    Simulate(SimulateArgs),
    /// Monte-Carlo replication of a design with several estimators.
    Replicate(ReplicateArgs),
    /// Cumulative incidence curves of a competing-risks fit.
    Cif(CifArgs),
}

#[derive(Args, Serialize, Clone)]
struct Columns {
    /// Input CSV (UTF-8, header row required).
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    y: String,
    #[arg(long, default_value = "delta")]
    delta: String,
    /// Dependent-censoring indicator. Without this column the data are taken
    /// to have no administrative censoring.
    #[arg(long, default_value = "xi")]
    xi: String,
    #[arg(long, default_value = "z")]
    z: String,
    #[arg(long, default_value = "w")]
    instrument: String,
    /// Comma-separated covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Column of known control values, used by the oracle variant.
    #[arg(long)]
    control: Option<String>,
    /// Follow-up times are already log-transformed.
    #[arg(long)]
    already_log: bool,
}

#[derive(Args, Serialize, Clone)]
struct Model {
    #[arg(long, value_enum, default_value_t = VariantArg::TwoStep)]
    variant: VariantArg,
    /// First-stage model for the treatment (auto: logit for 0/1 treatment,
    /// linear otherwise).
    #[arg(long, value_enum, default_value_t = Link::Auto)]
    link: Link,
    /// Fixed transformation parameters, one per latent time.
    #[arg(long, value_delimiter = ',')]
    theta_fixed: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    multistart: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args, Serialize, Clone)]
struct Run {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output file (default: standard output).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    columns: Columns,
    #[command(flatten)]
    model: Model,
    /// Cause label column; switches to the competing-risks model.
    #[arg(long)]
    cause: Option<String>,
    /// Number of competing events among the causes (default: all).
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    run: Run,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Serialize)]
struct GofArgs {
    #[command(flatten)]
    columns: Columns,
    #[command(flatten)]
    model: Model,
    /// Bootstrap samples (at least 100).
    #[arg(long = "B", default_value_t = 250)]
    b: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.10])]
    levels: Vec<f64>,
    /// CSV file receiving the bootstrap statistics.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[command(flatten)]
    run: Run,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = Design::Baseline)]
    scenario: Design,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Upper end of the uniform administrative censoring time.
    #[arg(long)]
    a_max: Option<f64>,
    /// Simulate without administrative censoring.
    #[arg(long)]
    no_admin: bool,
    /// Heteroscedasticity strength of the heteroscedastic design.
    #[arg(long, default_value_t = 0.3)]
    hetero: f64,
    /// CSV file receiving the latent quantities (control value and times).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    run: Run,
}

#[derive(Args, Serialize)]
struct ReplicateArgs {
    #[arg(long, value_enum, default_value_t = Design::Baseline)]
    scenario: Design,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Number of replications.
    #[arg(long = "N", default_value_t = 200)]
    replications: usize,
    /// Estimators to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [VariantArg::TwoStep, VariantArg::Naive, VariantArg::Independent, VariantArg::Oracle])]
    variants: Vec<VariantArg>,
    /// Time grid for competing-risks designs (start:stop:step or a list).
    #[arg(long, default_value = "0.5:3.5:0.1")]
    grid: String,
    /// Upper end of the global CIF error integral.
    #[arg(long, default_value_t = 3.0)]
    t_max: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output prefix; writes <prefix>.csv and <prefix>.json.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct CifArgs {
    #[command(flatten)]
    columns: Columns,
    #[command(flatten)]
    model: Model,
    #[arg(long, default_value = "cause")]
    cause: String,
    #[arg(long)]
    k: Option<usize>,
    /// Time grid on the scale of the input (start:stop:step or a list).
    #[arg(long)]
    grid: String,
    /// Covariate profile such as `x1=0.3,z=1,v=0`. Without it, curves are
    /// averaged over the sample.
    #[arg(long)]
    profile: Option<String>,
    #[command(flatten)]
    run: Run,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum VariantArg {
    TwoStep,
    Naive,
    Independent,
    Oracle,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::TwoStep => Variant::TwoStep,
            VariantArg::Naive => Variant::Naive,
            VariantArg::Independent => Variant::Independent,
            VariantArg::Oracle => Variant::Oracle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Link {
    Auto,
    Linear,
    Logit,
    Probit,
    OneSidedLogit,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum Design {
    Baseline,
    #[value(alias = "1-a")]
    Probit,
    #[value(alias = "1-b")]
    Cloglog,
    #[value(alias = "2-a")]
    SkewNormal,
    #[value(alias = "2-b")]
    T3,
    #[value(alias = "2-c")]
    Hetero,
    /// Two competing events and a dependent censoring time.
    Cmprsk,
}

impl Design {
    fn scenario(self) -> Option<Scenario> {
        Some(match self {
            Design::Baseline => Scenario::Baseline,
            Design::Probit => Scenario::LinkProbit,
            Design::Cloglog => Scenario::LinkCloglog,
            Design::SkewNormal => Scenario::SkewNormal,
            Design::T3 => Scenario::StudentT3,
            Design::Hetero => Scenario::Heteroscedastic,
            Design::Cmprsk => return None,
        })
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Format {
    Json,
    Csv,
}

type Res<T> = Result<T, Error>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Convergence { .. } | Error::Estimation(_) | Error::Numeric(_) | Error::Test(_) => 3,
        Error::Inference(_) => 4,
        _ => 2,
    }
}

fn input_error(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

fn header_of(text: &str) -> Res<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

fn ingest(cols: &Columns, cause: Option<&str>) -> Res<Ingested> {
    let text = fs::read_to_string(&cols.input)
        .map_err(|e| input_error(format!("cannot read {}: {e}", cols.input.display())))?;
    let header = header_of(&text)?;
    let map = ColumnMap {
        y: cols.y.clone(),
        delta: cols.delta.clone(),
        xi: header.contains(&cols.xi).then(|| cols.xi.clone()),
        z: cols.z.clone(),
        instrument: cols.instrument.clone(),
        covariates: cols.covariates.clone(),
        control: cols.control.clone(),
        cause: cause.map(str::to_string),
    };
    read_csv(text.as_bytes(), &map, cols.already_log)
}

fn first_stage(model: &Model, z: &[f64]) -> FirstStageSpec {
    let kind = match model.link {
        Link::Auto if z.iter().all(|&v| v == 0.0 || v == 1.0) => FirstStageKind::BinaryLogit,
        Link::Auto | Link::Linear => FirstStageKind::ContinuousLinear,
        Link::Logit => FirstStageKind::BinaryLogit,
        Link::Probit => FirstStageKind::BinaryProbit,
        Link::OneSidedLogit => FirstStageKind::BinaryOneSidedLogit,
    };
    FirstStageSpec::new(kind)
}

fn fit_config(model: &Model) -> Res<FitConfig> {
    let theta_mode = match model.theta_fixed.as_deref() {
        None => ThetaMode::Estimate,
        Some(&[a, b]) => ThetaMode::Fixed(a, b),
        Some(_) => return Err(input_error("--theta-fixed needs two values t1,t2")),
    };
    Ok(FitConfig {
        variant: model.variant.into(),
        theta_mode,
        multistart: model.multistart,
        level: model.level,
        ..FitConfig::default()
    })
}

fn cmprsk_config(model: &Model) -> CmprskFitConfig {
    CmprskFitConfig {
        variant: model.variant.into(),
        theta_fixed: model.theta_fixed.clone(),
        level: model.level,
        ..CmprskFitConfig::default()
    }
}

fn cmprsk_data(ing: Ingested, k: Option<usize>) -> Res<CmprskData> {
    let cause = ing.cause.ok_or_else(|| input_error("no cause column"))?;
    let r = cause.iter().copied().max().unwrap_or(0) as usize;
    CmprskData::new(ing.data, cause, r, k.unwrap_or(r))
}

/// Time grid from `start:stop:step` or a comma-separated list.
fn parse_grid(s: &str) -> Res<Vec<f64>> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| input_error(format!("bad grid value '{t}'")))
    };
    let grid: Vec<f64> = if s.contains(':') {
        let parts = s.split(':').map(num).collect::<Res<Vec<_>>>()?;
        let [a, b, h] = parts[..] else {
            return Err(input_error("grid must be start:stop:step"));
        };
        if !(h > 0.0 && b >= a) {
            return Err(input_error("grid needs step > 0 and stop ≥ start"));
        }
        let m = ((b - a) / h + 1e-9).floor() as usize;
        (0..=m).map(|i| a + h * i as f64).collect()
    } else {
        s.split(',').map(num).collect::<Res<_>>()?
    };
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(input_error("grid must be strictly increasing"));
    }
    Ok(grid)
}

fn log_grid(grid: &[f64], already_log: bool) -> Res<Vec<f64>> {
    if already_log {
        return Ok(grid.to_vec());
    }
    if grid.iter().any(|&t| t <= 0.0) {
        return Err(input_error("raw-scale grid times must be positive"));
    }
    Ok(grid.iter().map(|t| t.ln()).collect())
}

struct Out {
    config: serde_json::Value,
    seed: u64,
}

impl Out {
    fn json(&self, body: serde_json::Value) -> serde_json::Value {
        let mut v = json!({ "version": env!("CARGO_PKG_VERSION"), "seed": self.seed, "config": self.config });
        if let (Some(m), serde_json::Value::Object(b)) = (v.as_object_mut(), body) {
            m.extend(b);
        }
        v
    }

    /// Comment lines that precede every CSV artifact.
    fn csv_preamble(&self) -> String {
        format!(
            "# cfsurv {}\n# seed: {}\n# config: {}\n",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.config
        )
    }
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Res<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn emit_json(path: Option<&Path>, value: &serde_json::Value) -> Res<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    emit(path, s.as_bytes())
}

fn cmd_fit(a: &FitArgs, out: &Out) -> Res<Option<Error>> {
    let ing = ingest(&a.columns, a.cause.as_deref())?;
    let fs = first_stage(&a.model, &ing.data.z);
    let (body, estimates, inference) = if a.cause.is_some() {
        let data = cmprsk_data(ing, a.k)?;
        let f = fit_cmprsk(&data, &fs, &cmprsk_config(&a.model))?;
        (
            json!({ "first_stage": fs, "counts": data.counts(), "result": f }),
            f.estimates.clone(),
            f.inference_error.clone(),
        )
    } else {
        let f = fit(&ing.data, &fs, &fit_config(&a.model)?)?;
        (
            json!({ "first_stage": fs, "result": f }),
            f.estimates.clone(),
            f.inference_error.clone(),
        )
    };
    match a.format {
        Format::Json => emit_json(a.run.output.as_deref(), &out.json(body))?,
        Format::Csv => {
            let mut buf = out.csv_preamble().into_bytes();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record([
                    "parameter",
                    "estimate",
                    "se",
                    "ci_lower",
                    "ci_upper",
                    "null_value",
                    "p_value",
                ])?;
                let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
                for e in &estimates {
                    w.write_record([
                        e.name.clone(),
                        num(e.estimate),
                        opt(e.se),
                        opt(e.ci.map(|c| c.0)),
                        opt(e.ci.map(|c| c.1)),
                        num(e.null_value),
                        opt(e.p_value),
                    ])?;
                }
                w.flush()?;
            }
            emit(a.run.output.as_deref(), &buf)?;
        }
    }
    Ok(inference.map(Error::Inference))
}

fn cmd_gof(a: &GofArgs, out: &Out) -> Res<Option<Error>> {
    let ing = ingest(&a.columns, None)?;
    let fs = first_stage(&a.model, &ing.data.z);
    let f = fit(&ing.data, &fs, &fit_config(&a.model)?)?;
    let cfg = GofConfig {
        bootstrap: a.b,
        seed: a.run.seed,
        threads: a.run.threads,
        levels: a.levels.clone(),
        ..GofConfig::default()
    };
    let g = bootstrap_gof(&ing.data, &fs, &f, &cfg)?;
    if let Some(path) = &a.stats {
        let mut buf = out.csv_preamble().into_bytes();
        let index: Vec<f64> = (1..=g.boot_stats.len()).map(|b| b as f64).collect();
        write_columns(&mut buf, &[("b", &index), ("statistic", &g.boot_stats)])?;
        fs::write(path, buf)?;
    }
    let body = json!({
        "first_stage": fs,
        "fit": { "estimates": f.estimates, "loglik": f.loglik, "converged": f.converged },
        "gof": g,
    });
    emit_json(a.run.output.as_deref(), &out.json(body))?;
    Ok(None)
}

fn dgp(scenario: Scenario, a: &SimulateArgs) -> DgpSpec {
    let mut spec = DgpSpec::new(scenario, a.n, a.run.seed);
    spec.hetero = a.hetero;
    if a.no_admin {
        spec.admin = AdminSpec::None;
    } else if let Some(a_max) = a.a_max {
        spec.admin = AdminSpec::Uniform { a_max };
    }
    spec
}

fn cmd_simulate(a: &SimulateArgs, out: &Out) -> Res<Option<Error>> {
    let mut buf = out.csv_preamble().into_bytes();
    buf.extend_from_slice(b"# y holds log follow-up times\n");
    let mut truth = out.csv_preamble().into_bytes();
    match a.scenario.scenario() {
        Some(s) => {
            let spec = dgp(s, a);
            let sim = generate(&spec)?;
            write_csv(&mut buf, &sim.data, None)?;
            let l = &sim.latent;
            write_columns(&mut truth, &[("v", &l.v), ("t", &l.t), ("c", &l.c), ("a", &l.a)])?;
        }
        None => {
            let mut spec = CmprskDgpSpec::new(a.n, a.run.seed);
            if a.no_admin {
                spec.admin = AdminSpec::None;
            } else if let Some(a_max) = a.a_max {
                spec.admin = AdminSpec::Uniform { a_max };
            }
            let sim = generate_cmprsk(&spec)?;
            write_csv(&mut buf, &sim.data.base, Some(&sim.data.cause))?;
            let v = sim.data.base.control.clone().unwrap_or_default();
            let t: Vec<Vec<f64>> = (0..spec.truth.r())
                .map(|j| sim.latent.iter().map(|row| row[j]).collect())
                .collect();
            let names: Vec<String> = (1..=t.len()).map(|j| format!("t{j}")).collect();
            let mut cols: Vec<(&str, &[f64])> = vec![("v", &v)];
            cols.extend(names.iter().map(String::as_str).zip(t.iter().map(Vec::as_slice)));
            write_columns(&mut truth, &cols)?;
        }
    }
    emit(a.run.output.as_deref(), &buf)?;
    if let Some(path) = &a.truth {
        fs::write(path, truth)?;
    }
    Ok(None)
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_replicate(a: &ReplicateArgs, out: &Out) -> Res<Option<Error>> {
    let mut csv_buf = out.csv_preamble().into_bytes();
    let body = match a.scenario.scenario() {
        Some(s) => {
            let spec = DgpSpec::new(s, a.n, a.seed);
            let configs: Vec<FitConfig> = a.variants.iter().map(|&v| FitConfig::new(v.into())).collect();
            let report = replicate(&spec, &configs, a.replications, a.threads)?;
            report.write_csv(&mut csv_buf)?;
            json!({ "report": report })
        }
        None => {
            let grid = parse_grid(&a.grid)?;
            let spec = CmprskDgpSpec::new(a.n, a.seed);
            let rep = replicate_cmprsk(&spec, a.replications, &grid, a.t_max, a.threads)?;
            {
                let mut w = csv::Writer::from_writer(&mut csv_buf);
                w.write_record(["estimator", "cause", "t", "expected", "mean", "rmse", "global_rmse"])?;
                for (name, metrics) in [
                    ("two-step", &rep.two_step),
                    ("naive", &rep.naive),
                    ("nonparametric", &rep.nonparametric),
                ] {
                    for (j, m) in metrics.iter().enumerate() {
                        for i in 0..m.grid.len() {
                            w.write_record([
                                name.to_string(),
                                (j + 1).to_string(),
                                num(m.grid[i]),
                                num(m.expected[i]),
                                num(m.mean[i]),
                                num(m.rmse[i]),
                                num(m.global),
                            ])?;
                        }
                    }
                }
                w.flush()?;
            }
            json!({ "report": rep })
        }
    };
    fs::write(with_ext(&a.output, "csv"), csv_buf)?;
    emit_json(Some(&with_ext(&a.output, "json")), &out.json(body))?;
    Ok(None)
}

/// Parses `name=value` pairs of a covariate profile.
fn parse_profile(s: &str, names: &[String]) -> Res<(Vec<f64>, f64, f64)> {
    let mut x = vec![f64::NAN; names.len()];
    let (mut z, mut v) = (None, 0.0);
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, val) = part
            .split_once('=')
            .ok_or_else(|| input_error(format!("bad profile entry '{part}'")))?;
        let val: f64 = val
            .trim()
            .parse()
            .map_err(|_| input_error(format!("bad profile value '{val}'")))?;
        match k.trim() {
            "z" => z = Some(val),
            "v" => v = val,
            name => {
                let j = names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| input_error(format!("unknown profile covariate '{name}'")))?;
                x[j] = val;
            }
        }
    }
    if let Some(j) = x.iter().position(|v| v.is_nan()) {
        return Err(input_error(format!("profile misses covariate '{}'", names[j])));
    }
    let z = z.ok_or_else(|| input_error("profile misses the treatment value z"))?;
    let mut row = vec![1.0];
    row.extend(x);
    Ok((row, z, v))
}

fn cmd_cif(a: &CifArgs, out: &Out) -> Res<Option<Error>> {
    let ing = ingest(&a.columns, Some(&a.cause))?;
    let fs = first_stage(&a.model, &ing.data.z);
    let data = cmprsk_data(ing, a.k)?;
    let f = fit_cmprsk(&data, &fs, &cmprsk_config(&a.model))?;
    let grid = parse_grid(&a.grid)?;
    let lgrid = log_grid(&grid, a.columns.already_log)?;
    let k = data.k;
    let mut cols: Vec<(String, Vec<f64>)> = vec![("t".into(), grid.clone())];
    match &a.profile {
        Some(p) => {
            let (x, z, v) = parse_profile(p, &data.base.covariate_names)?;
            for j in 1..=k {
                cols.push((format!("cif{j}"), cif_curve(&f.params, j, &lgrid, &x, z, v)?));
            }
        }
        None => {
            let v = match f.variant {
                Variant::Naive => vec![0.0; data.n()],
                Variant::Oracle => data
                    .base
                    .control
                    .clone()
                    .ok_or_else(|| input_error("oracle needs --control"))?,
                _ => fs.control_values(&data.base, &f.gamma_hat)?,
            };
            for j in 1..=k {
                cols.push((format!("cif{j}"), marginal_cif(&f.params, j, &lgrid, &data.base, &v)?));
            }
            let labels: Vec<u8> = data.cause.iter().map(|&c| if c as usize > k { 0 } else { c }).collect();
            let np = nonparametric_cif(&data.base.y, &labels, k)?;
            for j in 1..=k {
                cols.push((
                    format!("aalen_johansen{j}"),
                    lgrid.iter().map(|&t| np.at(j, t)).collect(),
                ));
            }
        }
    }
    let mut buf = out.csv_preamble().into_bytes();
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
    write_columns(&mut buf, &refs)?;
    emit(a.run.output.as_deref(), &buf)?;
    Ok(None)
}

fn run(cli: &Cli) -> Res<Option<Error>> {
    let config = serde_json::to_value(cli)?;
    let seed = match &cli.command {
        Command::Fit(a) => a.run.seed,
        Command::Gof(a) => a.run.seed,
        Command::Simulate(a) => a.run.seed,
        Command::Replicate(a) => a.seed,
        Command::Cif(a) => a.run.seed,
    };
    let out = Out { config, seed };
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, &out),
        Command::Gof(a) => cmd_gof(a, &out),
        Command::Simulate(a) => cmd_simulate(a, &out),
        Command::Replicate(a) => cmd_replicate(a, &out),
        Command::Cif(a) => cmd_cif(a, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(e)) | Err(e) => {
            eprintln!("cfsurv: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
