use std::path::Path;
use std::process::{Command, Output};

use gridlearn::datagen::read_dataset;
use gridlearn::powerflow::violation_report_with;
use gridlearn::{cases, LoadPoint, OperatingPoint, ThermalLimit};

fn gridlearn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridlearn"))
        .current_dir(dir)
        .env_remove("GRIDLEARN_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Generates and trains a small case9 model in `dir/o`.
fn pipeline(dir: &Path) {
    let o = gridlearn(dir, &["generate", "--case", "case9", "--n-points", "30", "--out-dir", "o", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gridlearn(
        dir,
        &[
            "train",
            "--case",
            "case9",
            "--out-dir",
            "o",
            "--seed",
            "4",
            "--max-epochs",
            "20",
            "--hidden",
            "8,8",
            "--rho",
            "10",
            "--u-lambda",
            "5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gridlearn(dir.path(), &["validate", "case14"])), 0);

    let text = cases::builtin("case9").unwrap();
    let no_ref = text.replacen("\t1\t3\t", "\t1\t1\t", 1);
    assert_ne!(no_ref, text);
    std::fs::write(dir.path().join("noref.m"), no_ref).unwrap();
    let o = gridlearn(dir.path(), &["validate", "noref.m"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("reference bus"), "{}", stderr(&o));

    let broken = text.replacen("mpc.bus = [", "mpc.bus = [ 1 2 ; ; oops", 1);
    std::fs::write(dir.path().join("broken.m"), broken).unwrap();
    assert_eq!(code(&gridlearn(dir.path(), &["validate", "broken.m"])), 2);
    assert_eq!(code(&gridlearn(dir.path(), &["validate", "missing.m"])), 2);
}

#[test]
fn generate_is_reproducible_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.jsonl", "b.jsonl"] {
        let o = gridlearn(d, &["generate", "--case", "case14", "--n-points", "12", "--seed", "3", "--dataset", name]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    let ds = read_dataset(&d.join("a.jsonl"), &cases::network("case14"), 1e-6).unwrap();
    assert!(ds.len() <= 13);
    assert_eq!(ds.manifest.n_feasible, ds.len());
    assert_eq!(ds.manifest.n_feasible + ds.manifest.n_discarded, ds.manifest.n_candidates);
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "case = \"case9\"\nn_points = 4\nseed = 1\n").unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_gridlearn"));
        c.current_dir(d).env_remove("GRIDLEARN_SEED").args(["generate", "--config", "run.toml", "--dataset", name]);
        if let Some(e) = env {
            c.env("GRIDLEARN_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(d.join(name)).unwrap()
    };
    let file = run("file.jsonl", None, None);
    let env = run("env.jsonl", Some("2"), None);
    let flag = run("flag.jsonl", Some("2"), Some("1"));
    let explicit2 = run("two.jsonl", None, Some("2"));
    assert_ne!(file, env);
    assert_eq!(env, explicit2);
    assert_eq!(flag, file);
}

#[test]
fn train_domain_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = gridlearn(d, &["train", "--case", "case9", "--dataset", "none.jsonl", "--max-epochs", "1"]);
    assert_eq!(code(&o), 1);

    let o = gridlearn(d, &["generate", "--case", "case9", "--n-points", "5", "--dataset", "d.jsonl"]);
    assert_eq!(code(&o), 0);
    let o = gridlearn(d, &["train", "--case", "case14", "--dataset", "d.jsonl", "--max-epochs", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("manifest"), "{}", stderr(&o));

    let o = gridlearn(d, &["train", "--case", "case9", "--dataset", "d.jsonl", "--variant", "mb", "--rho", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resume_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = gridlearn(d, &["generate", "--case", "case9", "--n-points", "20", "--dataset", "d.jsonl"]);
    assert_eq!(code(&o), 0);
    let base = ["train", "--case", "case9", "--dataset", "d.jsonl", "--hidden", "8,8", "--rho", "3", "--u-lambda", "4"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        let o = gridlearn(d, &a);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    with(&["--max-epochs", "10", "--checkpoint", "full.json", "--log", "full.csv"]);
    with(&["--max-epochs", "6", "--checkpoint", "part.json", "--log", "part.csv"]);
    with(&["--max-epochs", "10", "--checkpoint", "part.json", "--log", "part.csv", "--resume"]);
    assert_eq!(std::fs::read(d.join("full.json")).unwrap(), std::fs::read(d.join("part.json")).unwrap());
    let rows = std::fs::read_to_string(d.join("part.csv")).unwrap().lines().count();
    assert_eq!(rows, 11);
}

#[test]
fn evaluate_replayed_labels_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let o = gridlearn(d, &["evaluate", "--case", "case9", "--out-dir", "o", "--replay-labels", "--report-dir", "r0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let errors = std::fs::read_to_string(d.join("r0/errors.csv")).unwrap();
    for line in errors.lines().skip(1) {
        assert!(line.ends_with(",0e0"), "{line}");
    }

    for r in ["r1", "r2"] {
        let o = gridlearn(d, &["evaluate", "--case", "case9", "--out-dir", "o", "--report-dir", r]);
        assert_eq!(code(&o), 0);
    }
    let gaps = std::fs::read_to_string(d.join("r1/gaps.csv")).unwrap();
    assert!(gaps.lines().nth(1).unwrap().split(',').nth(2) == Some("-"), "{gaps}");
    for f in std::fs::read_dir(d.join("r1")).unwrap() {
        let name = f.unwrap().file_name();
        if name != "timing.csv" {
            let a = std::fs::read(d.join("r1").join(&name)).unwrap();
            assert_eq!(a, std::fs::read(d.join("r2").join(&name)).unwrap(), "{name:?}");
        }
    }
}

#[test]
fn predict_projection_and_width() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let net = cases::network("case9");
    let load = LoadPoint::nominal(&net);
    std::fs::write(d.join("l.json"), serde_json::to_string(&load).unwrap()).unwrap();
    let o = gridlearn(
        d,
        &["predict", "--case", "case9", "--out-dir", "o", "--loads", "l.json", "--project", "--out", "p.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains(" ms"), "{}", stderr(&o));
    let out: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(d.join("p.json")).unwrap()).unwrap();
    let op: OperatingPoint = serde_json::from_value(out[0].clone()).unwrap();
    assert!(violation_report_with(&net, &load, &op, ThermalLimit::Squared).all_within(1e-6));

    // A projected point projects onto itself.
    let o =
        gridlearn(d, &["loadflow", "--case", "case9", "--loads", "l.json", "--setpoint", "p.json", "--out", "q.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(d.join("q.json")).unwrap()).unwrap();
    let dist = again[0]["distance"].as_f64().unwrap();
    assert!(dist < 1e-8, "distance {dist}");

    std::fs::write(d.join("bad.json"), r#"{"p": [0.1], "q": [0.0]}"#).unwrap();
    let o = gridlearn(d, &["predict", "--case", "case9", "--out-dir", "o", "--loads", "bad.json"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).is_empty());
}
