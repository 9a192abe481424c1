use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crr::io::save_csv;
use crr::sim::{gen_dataset, ErrorKind, Scenario};
use crr::Dataset;
use ndarray::{Array1, Array2};
use serde_json::Value;

fn crr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crr")).args(args).current_dir(dir).env_remove("CRR_THREADS").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn desk_csv(dir: &Path, name: &str, n: usize, p: usize) -> PathBuf {
    let mut sc = Scenario::desk("cli", p, ErrorKind::Normal);
    sc.n = n;
    let path = dir.join(name);
    save_csv(&gen_dataset(&sc, 0).unwrap(), &path).unwrap();
    path
}

/// Drops wall-clock fields so two reports can be compared.
fn without_timing(mut v: Value) -> Value {
    if let Value::Object(m) = &mut v {
        m.remove("timing");
        for (_, x) in m.iter_mut() {
            *x = without_timing(x.take());
        }
    } else if let Value::Array(a) = &mut v {
        for x in a.iter_mut() {
            *x = without_timing(x.take());
        }
    }
    v
}

fn json(path: &Path) -> Value {
    without_timing(serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap())
}

const CONFIG: &str = "seed = 11\n[boot]\nB = 200\nG = \"1..5\"\n";

#[test]
fn fit_and_infer_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk_csv(d, "d.csv", 60, 12);
    fs::write(d.join("c.toml"), CONFIG).unwrap();
    for tag in ["a", "b"] {
        ok(&crr(&["fit", "--data", "d.csv", "--config", "c.toml", "--out", &format!("fit_{tag}.json")], d));
        ok(&crr(&["infer", "--data", "d.csv", "--config", "c.toml", "--out", &format!("sci_{tag}.csv")], d));
    }
    assert_eq!(json(&d.join("fit_a.json")), json(&d.join("fit_b.json")));
    assert_eq!(fs::read(d.join("sci_a.csv")).unwrap(), fs::read(d.join("sci_b.csv")).unwrap());
    assert_eq!(json(&d.join("sci_a.json")), json(&d.join("sci_b.json")));

    let report = json(&d.join("sci_a.json"));
    assert_eq!(report["provenance"]["seed"], 11);
    assert_eq!(report["result"]["B"], 200);
    let table = fs::read_to_string(d.join("sci_a.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.starts_with("k,name,beta_tilde,lower,upper,excludes_zero\n"));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk_csv(d, "d.csv", 50, 8);
    fs::write(d.join("c.toml"), CONFIG).unwrap();
    for t in ["1", "3"] {
        let out = Command::new(env!("CARGO_BIN_EXE_crr"))
            .args(["infer", "--data", "d.csv", "--config", "c.toml", "--out", &format!("t{t}.csv")])
            .current_dir(d)
            .env("CRR_THREADS", t)
            .output()
            .unwrap();
        ok(&out);
    }
    assert_eq!(fs::read(d.join("t1.csv")).unwrap(), fs::read(d.join("t3.csv")).unwrap());

    let out = Command::new(env!("CARGO_BIN_EXE_crr"))
        .args(["fit", "--data", "d.csv", "--out", "f.json"])
        .current_dir(d)
        .env("CRR_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CRR_THREADS"));
}

#[test]
fn all_coordinates_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk_csv(d, "d.csv", 100, 50);
    ok(&crr(&["infer", "--data", "d.csv", "--G", "all", "--B", "200", "--alpha", "0.1", "--out", "sci.csv"], d));
    let table = fs::read_to_string(d.join("sci.csv")).unwrap();
    assert_eq!(table.lines().count(), 51);
    assert_eq!(json(&d.join("sci.json"))["result"]["alpha"], 0.1);
}

#[test]
fn noiseless_signals_are_detected() {
    let n = 30;
    let x = Array2::from_shape_fn((n, 4), |(i, j)| ((i * 7 + j * 13) % 11) as f64 - 5.0 + 0.1 * (i as f64).sin());
    let y: Array1<f64> = x.column(0).mapv(|v| 2.0 * v) - x.column(1).mapv(|v| 1.5 * v);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_csv(&Dataset::new(x, y).unwrap(), d.join("d.csv")).unwrap();
    fs::write(d.join("c.toml"), "standardize = true\n").unwrap();
    ok(&crr(&["infer", "--data", "d.csv", "--config", "c.toml", "--B", "200", "--out", "sci.csv"], d));
    let mut rdr = csv::Reader::from_path(d.join("sci.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[0][5], "true");
    assert_eq!(&rows[1][5], "true");
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    desk_csv(d, "d.csv", 40, 8);
    let out = crr(&["infer", "--data", "d.csv", "--G", "1..20", "--out", "sci.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("index set") && err.contains("index 9"), "{err}");

    fs::write(d.join("bad.csv"), "y,a,b\n1,2,3\n4,x,6\n").unwrap();
    let out = crr(&["fit", "--data", "bad.csv", "--out", "f.json"], d);
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("load data") && err.contains("row 2") && err.contains("\"a\""), "{err}");

    fs::write(d.join("c.toml"), "[solver]\nbogus = 1\n").unwrap();
    let out = crr(&["fit", "--data", "d.csv", "--config", "c.toml", "--out", "f.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = crr(&["fit", "--data", "d.csv"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_resumes_missing_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let entry = |id: &str, err: &str| {
        format!("[[scenario]]\nid = \"{id}\"\nn = 40\np = 6\nerror = \"{err}\"\nreps = 3\nB = 100\nG = \"1..3\"\n")
    };
    fs::write(d.join("one.toml"), format!("seed = 5\n{}", entry("s1", "normal"))).unwrap();
    fs::write(d.join("two.toml"), format!("seed = 5\n{}{}", entry("s1", "normal"), entry("s2", "cauchy"))).unwrap();

    ok(&crr(&["simulate", "--scenarios", "one.toml", "--out", "r.csv"], d));
    let first = fs::read_to_string(d.join("r.csv")).unwrap();
    ok(&crr(&["simulate", "--scenarios", "two.toml", "--out", "r.csv"], d));
    let second = fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(second.starts_with(&first));
    let ids: Vec<&str> = second.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["s1", "s2"]);
    assert_eq!(json(&d.join("r.json"))["runs"].as_array().unwrap().len(), 2);

    ok(&crr(&["simulate", "--scenarios", "two.toml", "--out", "r.csv"], d));
    assert_eq!(fs::read_to_string(d.join("r.csv")).unwrap(), second);

    ok(&crr(&["simulate", "--scenarios", "two.toml", "--out", "fresh.csv"], d));
    assert_eq!(fs::read_to_string(d.join("fresh.csv")).unwrap(), second);
}

#[test]
fn are_and_screen() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = crr(&["are", "--error", "cauchy", "--kernel", "epanechnikov", "--h", "1.0", "--target", "huber", "--tau", "3"], d);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().next().unwrap().starts_with("ARE(crr vs huber"), "{text}");
    let out = crr(&["are", "--error", "cauchy", "--target", "ols", "--out", "are.json"], d);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains(": inf"));

    desk_csv(d, "d.csv", 80, 30);
    ok(&crr(&["screen", "--data", "d.csv", "--keep", "5", "--out", "s.csv"], d));
    let screened = crr::io::load_csv(d.join("s.csv")).unwrap();
    assert_eq!(screened.p(), 5);
    let ranking = &json(&d.join("s.json"))["result"]["ranking"];
    assert_eq!(ranking.as_array().unwrap().len(), 5);
    assert_eq!(ranking[0]["name"].as_str().unwrap(), screened.names()[0]);
}
