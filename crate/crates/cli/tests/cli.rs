use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sgame::bounds::{BoundInputs, BoundsReport};
use sgame::estimator::FitResult;
use sgame::verify::default_bounds;
use sgame::{Data, Params};

fn sgame(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgame"))
        .args(args)
        .current_dir(dir)
        .env("SGAME_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn linear_truth(p: usize, slopes: &[f64], var: f64) -> Params {
    let mut psi = Params::zeros(p, 1, default_bounds(1));
    psi.experts.intercepts[(0, 0)] = 0.4;
    psi.experts.slopes[0].row_mut(0)[..slopes.len()].copy_from_slice(slopes);
    psi.experts.covariances[0] = sgame::Matrix::from_diag(&[var]);
    psi
}

fn write_sim_config(dir: &Path, name: &str, truth: &Params, n: usize) {
    let cfg = serde_json::json!({ "n": n, "truth": truth });
    fs::write(dir.join(name), cfg.to_string()).unwrap();
}

#[test]
fn simulate_writes_header_rows_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    write_sim_config(dir.path(), "sim.json", &linear_truth(2, &[0.5, -0.5], 1.0), 10);
    ok(&sgame(&["simulate", "--config", "sim.json", "--out", "d.csv"], dir.path()));
    let text = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,x2,y1");
    assert_eq!(lines.len(), 11);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("d.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 0);
    assert!(side["truth"]["experts"].is_object());
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.csv", "b.csv"] {
        ok(&sgame(&["simulate", "--n", "50", "--seed", "7", "--out", out], dir.path()));
    }
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.json"), read("b.json"));
    ok(&sgame(&["simulate", "--n", "50", "--seed", "8", "--out", "c.csv"], dir.path()));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn simulate_rejects_out_of_class_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut truth = linear_truth(2, &[0.5, -0.5], 1.0);
    truth.experts.slopes[0][(0, 0)] = 9.0;
    write_sim_config(dir.path(), "bad.json", &truth, 10);
    let out = sgame(&["simulate", "--config", "bad.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("A_beta"));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"n": 10, "colour": "blue"}"#).unwrap();
    let out = sgame(&["simulate", "--config", "c.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

fn ols(data: &Data) -> Vec<f64> {
    let (n, p) = (data.n(), data.p());
    let x = nalgebra::DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { data.x(i)[j - 1] });
    let y = nalgebra::DVector::from_fn(n, |i, _| data.y(i)[0]);
    let xt = x.transpose();
    (&xt * &x).lu().solve(&(&xt * &y)).unwrap().iter().copied().collect()
}

#[test]
fn unpenalized_single_expert_fit_matches_ols() {
    let dir = tempfile::tempdir().unwrap();
    write_sim_config(dir.path(), "sim.json", &linear_truth(3, &[0.3, -0.3, 0.2], 0.5), 400);
    ok(&sgame(&["simulate", "--config", "sim.json", "--out", "d.csv"], dir.path()));
    ok(&sgame(&["fit", "d.csv", "--lambda", "0", "--k", "1", "--out", "f.json"], dir.path()));
    let fit: FitResult = serde_json::from_str(&fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    let data = Data::from_path(dir.path().join("d.csv")).unwrap();
    let want = ols(&data);
    assert!((fit.params.experts.intercepts[(0, 0)] - want[0]).abs() < 1e-6);
    for j in 0..3 {
        assert!((fit.params.experts.slopes[0][(0, j)] - want[j + 1]).abs() < 1e-6);
    }
}

#[test]
fn huge_lambda_zeroes_every_mask() {
    let dir = tempfile::tempdir().unwrap();
    ok(&sgame(&["simulate", "--n", "200", "--out", "d.csv"], dir.path()));
    ok(&sgame(&["fit", "d.csv", "--lambda", "1e9", "--k", "2", "--out", "f.json"], dir.path()));
    let fit: FitResult = serde_json::from_str(&fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    assert_eq!(fit.active_count(), 0);
    assert!(fit.active_gating.iter().flatten().all(|&a| !a));
}

#[test]
fn ball_fit_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    ok(&sgame(&["simulate", "--n", "150", "--out", "d.csv"], dir.path()));
    ok(&sgame(&["fit", "d.csv", "--ball-m", "1", "--k", "2", "--out", "f.json"], dir.path()));
    let fit: FitResult = serde_json::from_str(&fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    assert_eq!(fit.ball_radius, Some(1));
    assert!(fit.penalized_l1 <= 1.0 + 1e-10);
    let both = sgame(&["fit", "d.csv", "--ball-m", "1", "--lambda", "0"], dir.path());
    assert!(!both.status.success());
}

#[test]
fn fit_of_missing_file_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgame(&["fit", "nope.csv", "--lambda", "0"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn bounds_default_kappa_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgame(&["bounds", "--n", "300", "--p", "7", "--k", "3", "--out", "b.json"], dir.path());
    ok(&out);
    let report: BoundsReport<f64> = serde_json::from_str(&fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    let inputs = BoundInputs::new(300, 7, 1, default_bounds(3), 148.0);
    let again = BoundsReport::compute(&inputs, &[1, 2, 4, 8]).unwrap();
    assert_eq!(report, again);
    assert!(report.theorem_kappa);
    let printed: BoundsReport<f64> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, again);
}

#[test]
fn bounds_small_kappa_needs_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!sgame(&["bounds", "--kappa", "100"], dir.path()).status.success());
    let out = sgame(&["bounds", "--kappa", "100", "--allow-small-kappa"], dir.path());
    ok(&out);
    let r: BoundsReport<f64> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!r.theorem_kappa);
}

#[test]
fn verify_weyl_passes_and_bogus_suite_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgame(&["verify", "weyl", "--trials", "1000", "--out", "r.json"], dir.path());
    ok(&out);
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["violations"], 0);
    assert_eq!(reports[0]["trials"], 1000);
    let bogus = sgame(&["verify", "bogus"], dir.path());
    assert_eq!(bogus.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bogus.stderr).contains("possible values"));
}

#[test]
fn simulate_fit_round_trip_uses_only_files() {
    let dir = tempfile::tempdir().unwrap();
    ok(&sgame(&["simulate", "--n", "120", "--seed", "3", "--out", "d.csv"], dir.path()));
    // a fresh directory holding only the emitted files
    let other = tempfile::tempdir().unwrap();
    for f in ["d.csv", "d.json"] {
        fs::copy(dir.path().join(f), other.path().join(f)).unwrap();
    }
    ok(&sgame(&["fit", "d.csv", "--lambda", "0.05", "--out", "f1.json"], dir.path()));
    ok(&sgame(&["fit", "d.csv", "--lambda", "0.05", "--out", "f2.json"], other.path()));
    assert_eq!(fs::read(dir.path().join("f1.json")).unwrap(), fs::read(other.path().join("f2.json")).unwrap());
}

#[test]
fn experiment_writes_the_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "n_grid": [30],
        "replications": 10,
        "kl_method": { "quadrature": { "nodes": 201, "truncation": null } },
        "fit_cfg": { "restarts": 1, "max_em_iters": 50 }
    });
    fs::write(dir.path().join("e.json"), cfg.to_string()).unwrap();
    ok(&sgame(&["experiment", "--config", "e.json", "--out", "e.csv"], dir.path()));
    let text = fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("n,lambda,rep_count,lhs_mean,lhs_se,rhs,rhs_term1,rhs_term2,rhs_term3,rhs_term4,holds")
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "30");
    assert_eq!(row[2], "10");
    assert_eq!(row[10], "true");
}
