use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_egfl");

const TINY: &str = "\
N=3
K=2
D_kn=80
T=2
L=2
R_lambda=1
gamma=0.82,0.85,0.84
seed=5
variants=EGFL-JS,FL-vanilla
ig_steps=8
";

fn egfl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(cwd).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_run(cwd: &Path) {
    fs::write(cwd.join("tiny.cfg"), TINY).unwrap();
    let g = egfl(cwd, &["gen-data", "--seed", "5", "--k", "2", "--n", "3", "--d", "80", "--out", "data"]);
    assert!(g.status.success(), "{}", stderr(&g));
    let t = egfl(cwd, &["train", "--config", "tiny.cfg", "--data", "data", "--out", "run"]);
    assert!(t.status.success(), "{}", stderr(&t));
}

#[test]
fn gen_data_defaults_write_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = egfl(dir.path(), &["gen-data", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csvs = fs::read_dir(dir.path().join("data"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 150);
    assert!(dir.path().join("data/manifest.json").is_file());
    assert!(dir.path().join("data/dataset.json").is_file());
}

#[test]
fn zero_clients_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = egfl(dir.path(), &["gen-data", "--k", "0", "--out", "data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = egfl(dir.path(), &["gen-data", "--seed", "11", "--k", "3", "--d", "50", "--out", out]);
        assert!(o.status.success());
    }
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn missing_data_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let o = egfl(dir.path(), &["train", "--config", "tiny.cfg", "--data", "nowhere", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn invalid_gamma_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), TINY.replace("gamma=0.82,0.85,0.84", "gamma=0.82,1.5,0.84")).unwrap();
    let o = egfl(dir.path(), &["train", "--config", "bad.cfg", "--data", "data", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn missing_run_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["report", "--run", "gone", "--figure", "loss"][..],
        &["bound", "--run", "gone", "--epsilon-grid", "0,1"][..],
    ] {
        let o = egfl(dir.path(), args);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("gone"));
    }
}

#[test]
fn report_and_bound_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_run(dir.path());

    let bad = egfl(dir.path(), &["report", "--run", "run", "--figure", "heatmap"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("heatmap"));

    for fig in ["loss", "recall", "comprehensiveness", "sweep", "attributions", "correlation"] {
        let o = egfl(dir.path(), &["report", "--run", "run", "--figure", fig]);
        assert!(o.status.success(), "{fig}: {}", stderr(&o));
        assert!(dir.path().join(format!("run/figures/{fig}.csv")).is_file());
    }

    let o = egfl(dir.path(), &["bound", "--run", "run", "--epsilon-grid", "0:2:5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(dir.path().join("run/bound_report.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let eps = headers.iter().position(|h| h == "epsilon").unwrap();
    let delta = headers.iter().position(|h| h == "delta_printed").unwrap();
    let slice = headers.iter().position(|h| h == "slice").unwrap();
    let variant = headers.iter().position(|h| h == "variant").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 3 * 5);
    for group in rows.chunks(5) {
        assert!(group.iter().all(|r| r[slice] == group[0][slice] && r[variant] == group[0][variant]));
        let d: Vec<f64> = group.iter().map(|r| r[delta].parse().unwrap()).collect();
        assert_eq!(group[0][eps].parse::<f64>().unwrap(), 0.0);
        assert_eq!(d[0], 0.0);
        assert!(d.windows(2).all(|w| w[1] >= w[0]), "{d:?}");
    }
    assert!(dir.path().join("run/bound_report.manifest.json").is_file());
}
