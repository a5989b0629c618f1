use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfsurv::estimator::{fit, FitConfig, Variant};
use cfsurv::firststage::{FirstStageKind, FirstStageSpec};
use cfsurv::simkit::{generate, DgpSpec};
use serde_json::Value;

fn cfsurv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsurv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn workdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("cfsurv-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}: {}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn fit_reproduces_the_library_result() {
    let dir = workdir("fit");
    let data = dir.join("d.csv");
    ok(&cfsurv(&["simulate", "--n", "600", "--seed", "5", "-o", p(&data)]));
    let out = dir.join("f.json");
    ok(&cfsurv(&[
        "fit",
        "-i",
        p(&data),
        "--already-log",
        "--seed",
        "9",
        "-o",
        p(&out),
    ]));
    let json = read_json(&out);
    assert_eq!(json["seed"], 9);
    assert_eq!(json["config"]["command"]["fit"]["model"]["variant"], "two-step");

    let sim = generate(&DgpSpec::baseline(600, 5)).unwrap();
    let lib = fit(
        &sim.data,
        &FirstStageSpec::new(FirstStageKind::BinaryLogit),
        &FitConfig::new(Variant::TwoStep),
    )
    .unwrap();
    assert_eq!(json["result"], serde_json::to_value(&lib).unwrap());

    let csv = cfsurv(&[
        "fit",
        "-i",
        p(&data),
        "--already-log",
        "--format",
        "csv",
        "--variant",
        "naive",
    ]);
    ok(&csv);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("# cfsurv"));
    assert!(text.contains("parameter,estimate,se,ci_lower,ci_upper,null_value,p_value"));
    assert!(text.lines().any(|l| l.starts_with("theta1,")));
}

#[test]
fn input_problems_exit_with_code_2() {
    let dir = workdir("input");
    let missing = dir.join("missing.csv");
    std::fs::write(&missing, "y,delta,xi,x1,w,z\n1.0,1,0,,1,0\n").unwrap();
    let o = cfsurv(&["fit", "-i", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing value"));

    let o = cfsurv(&["fit", "-i", p(&missing), "--z", "treatment"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("treatment"));

    let o = cfsurv(&["fit", "-i", p(&dir.join("absent.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = cfsurv(&["fit", "-i", p(&missing), "--theta-fixed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cfsurv(&["fit", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn raw_times_are_logged_on_ingestion() {
    let dir = workdir("raw");
    let data = dir.join("d.csv");
    ok(&cfsurv(&["simulate", "--n", "500", "--seed", "2", "-o", p(&data)]));
    let text = std::fs::read_to_string(&data).unwrap();
    let mut raw = String::new();
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        match line.split_once(',') {
            Some((y, rest)) if y != "y" => raw.push_str(&format!("{:?},{rest}\n", y.parse::<f64>().unwrap().exp())),
            _ => raw.push_str(&format!("{line}\n")),
        }
    }
    let raw_path = dir.join("raw.csv");
    std::fs::write(&raw_path, raw).unwrap();
    let a = cfsurv(&["fit", "-i", p(&data), "--already-log", "--format", "csv"]);
    let b = cfsurv(&["fit", "-i", p(&raw_path), "--format", "csv"]);
    ok(&a);
    ok(&b);
    let est = |o: &Output| -> Vec<f64> {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("parameter"))
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    for (x, y) in est(&a).iter().zip(est(&b)) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn gof_is_thread_independent() {
    let dir = workdir("gof");
    let data = dir.join("d.csv");
    ok(&cfsurv(&["simulate", "--n", "400", "--seed", "7", "-o", p(&data)]));
    let run = |threads: &str| {
        let out = dir.join(format!("g{threads}.json"));
        let stats = dir.join(format!("s{threads}.csv"));
        ok(&cfsurv(&[
            "gof",
            "-i",
            p(&data),
            "--already-log",
            "--B",
            "100",
            "--seed",
            "3",
            "--threads",
            threads,
            "-o",
            p(&out),
            "--stats",
            p(&stats),
        ]));
        (read_json(&out), std::fs::read_to_string(stats).unwrap())
    };
    let (a, sa) = run("1");
    let (b, sb) = run("2");
    assert_eq!(a["gof"], b["gof"]);
    let p_value = a["gof"]["p_value"].as_f64().unwrap();
    assert!(p_value > 0.0 && p_value <= 1.0);
    let rows = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    assert_eq!(rows(&sa), rows(&sb));
    assert_eq!(rows(&sa).len() + a["gof"]["failures"].as_u64().unwrap() as usize, 100);
    assert!(sa.contains("# config:"));
}

#[test]
fn replicate_writes_the_metric_table() {
    let dir = workdir("rep");
    let prefix = dir.join("rep");
    let run = |threads: &str| {
        ok(&cfsurv(&[
            "replicate",
            "--n",
            "400",
            "--N",
            "3",
            "--variants",
            "two-step,naive",
            "--seed",
            "4",
            "--threads",
            threads,
            "-o",
            p(&prefix),
        ]));
        let csv = std::fs::read_to_string(dir.join("rep.csv")).unwrap();
        csv.lines()
            .filter(|l| !l.starts_with('#'))
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    let a = run("1");
    let b = run("2");
    assert_eq!(a, b);
    assert_eq!(a[0], "variant,parameter,truth,mean,bias,esd,rmse,cr,successes,failures");
    assert!(a.iter().any(|l| l.starts_with("naive,alpha_T,")));
    let json = read_json(&dir.join("rep.json"));
    assert_eq!(json["report"]["replications"], 3);
}

#[test]
fn cif_curves_from_competing_risks_data() {
    let dir = workdir("cif");
    let data = dir.join("c.csv");
    ok(&cfsurv(&[
        "simulate",
        "--scenario",
        "cmprsk",
        "--n",
        "700",
        "--seed",
        "1",
        "-o",
        p(&data),
    ]));
    let out = dir.join("cif.csv");
    ok(&cfsurv(&[
        "cif",
        "-i",
        p(&data),
        "--already-log",
        "--k",
        "2",
        "--grid",
        "0.5:3.5:0.5",
        "--profile",
        "x1=0.2,z=1,v=0.3",
        "-o",
        p(&out),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 7);
    for j in 1..=2 {
        assert!(rows.windows(2).all(|w| w[0][j] <= w[1][j]));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[j])));
    }
    assert!(text.lines().any(|l| l == "t,cif1,cif2"));

    let fit = cfsurv(&["fit", "-i", p(&data), "--already-log", "--cause", "cause", "--k", "2"]);
    ok(&fit);
    let json: Value = serde_json::from_slice(&fit.stdout).unwrap();
    assert_eq!(json["counts"].as_array().unwrap().len(), 4);
    assert!(json["result"]["estimate"].is_null());
    assert!(json["result"]["estimates"].as_array().unwrap().len() > 20);
}
