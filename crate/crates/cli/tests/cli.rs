use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use poolcs::numerics::RngStream;
use poolcs::simulate::{generate_signal, measure_exact, write_vector, NoiseParams, SignalSpec};
use poolcs::generate_pooling_matrix;

fn poolcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poolcs")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{"p": 120, "n_list": [80], "f_s_list": [0.02, 0.05], "q_list": [0.5],
            "trials": 3, "cv_runs": 2, "gamma_grid": [2.5, 8.0], "seed": 11}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn version_prints_semver() {
    let o = poolcs(&["version"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let v = text.trim().strip_prefix("poolcs ").unwrap();
    assert_eq!(v.split('.').count(), 3);
    assert!(v.split('.').all(|p| p.parse::<u32>().is_ok()));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(poolcs(&[]).status.code(), Some(1));
    assert_eq!(poolcs(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(poolcs(&["trial", "--cell", "n=80"]).status.code(), Some(1));
    let o = poolcs(&["trial", "--preset", "desk", "--cell", "n=80,bogus=2", "--index", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
    assert_eq!(poolcs(&["--threads", "0", "version"]).status.code(), Some(1));
    assert_eq!(poolcs(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_exits_two_with_filename() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent_config.json");
    let o = poolcs(&["sweep", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent_config.json"), "{}", stderr(&o));
}

#[test]
fn bad_config_contents_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    for text in [r#"{"unknown_key": 1}"#, r#"{"gamma_grid": [1.5]}"#, "not json", r#"{"preset": "desk"}"#] {
        fs::write(&path, text).unwrap();
        let o = poolcs(&["validate", "auxiliary", "--config", path.to_str().unwrap(), "--trials", "10"]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", stderr(&o));
        assert!(stderr(&o).contains("bad.json"));
    }
    let o = poolcs(&["validate", "auxiliary", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_identical_csvs_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = poolcs(&["sweep", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = poolcs(&["--threads", "2", "sweep", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["trials.csv", "aggregate.csv"] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name}");
    }
    let trials = fs::read_to_string(a.join("trials.csv")).unwrap();
    assert!(trials.starts_with("trial_index,n,p,q,f_s,sigma,q_a,estimator,gamma,rrmse"));
    assert_eq!(trials.lines().count(), 1 + 2 * 2 * 3);
}

#[test]
fn trial_prints_one_row_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = poolcs(&["trial", "--config", &cfg, "--cell", "n=80,q=0.5,fs=0.05", "--index", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("2,80,120,0.5,0.05,"));
    let again = poolcs(&["trial", "--config", &cfg, "--cell", "n=80,q=0.5,fs=0.05", "--index", "2"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn weights_reports_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = RngStream::new(4, &[]);
    let a = generate_pooling_matrix(60, 100, 0.5, &mut s).unwrap();
    let x = generate_signal(&SignalSpec::new(100, 0.03), &mut s).unwrap();
    let y = measure_exact(&a, &x.x_star, &NoiseParams::new(0.05, 0.95).unwrap(), &mut s).unwrap();
    let mpath = dir.path().join("a.txt");
    let ypath = dir.path().join("y.txt");
    a.write(&mpath).unwrap();
    write_vector(&ypath, &[], &y).unwrap();
    let o = poolcs(&["weights", "--matrix", mpath.to_str().unwrap(), "--measurements", ypath.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for needle in ["assumptions", "A1", "A3", "lambda_hat = ", "W = ", "beta = ", "beta_k"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    assert_eq!(text.lines().skip_while(|l| *l != "beta_k").count(), 101);

    let short = dir.path().join("short.txt");
    fs::write(&short, "1\n2\n").unwrap();
    let o = poolcs(&["weights", "--matrix", mpath.to_str().unwrap(), "--measurements", short.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn weights_without_force_fails_on_assumptions() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = RngStream::new(5, &[]);
    let a = generate_pooling_matrix(10, 40, 0.1, &mut s).unwrap();
    let y = a.apply(&generate_signal(&SignalSpec::new(40, 0.05), &mut s).unwrap().x_star);
    let mpath = dir.path().join("a.txt");
    let ypath = dir.path().join("y.txt");
    a.write(&mpath).unwrap();
    write_vector(&ypath, &[], &y).unwrap();
    let o = poolcs(&["weights", "--matrix", mpath.to_str().unwrap(), "--measurements", ypath.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("assumption"));
}

#[test]
fn validate_bernstein_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tails.csv");
    let o = poolcs(&["validate", "bernstein", "--trials", "50000", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let csv = fs::read_to_string(out).unwrap();
    assert!(csv.starts_with("check,trials,violations,empirical_rate,theoretical_rate,monte_carlo_4sigma,verdict\n"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",PASS"));
}

#[test]
fn validate_other_checks_run() {
    for args in [
        vec!["validate", "gaussian", "--trials", "500"],
        vec!["validate", "auxiliary", "--trials", "200"],
        vec!["validate", "identities", "--trials", "100"],
        vec!["validate", "lambda", "--trials", "5", "--cell", "n=300"],
        vec!["validate", "c1", "--trials", "3", "--cell", "n=200,p=400"],
    ] {
        let o = poolcs(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        assert!(!stdout(&o).is_empty());
    }
    let o = poolcs(&["validate", "gaussian", "--trials", "10", "--cell", "sigma=30"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn validate_trends_on_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("trends.csv");
    let o = poolcs(&["validate", "trends", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("trend in f_s"));
    assert!(stdout(&o).contains("signal scales"));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 1 + 4);
}
