use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use so3_denoise::geom::Mat3;
use so3_denoise::io::{load_checkpoint, load_trajectory, read_metrics_csv, read_sweep_csv};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_so3-denoise"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn synth(dir: &Path, frames: usize, jitter: f64) -> PathBuf {
    let path = dir.join("traj.xyz");
    run_ok(&[
        "synth",
        "--n-points",
        "8",
        "--n-frames",
        &frames.to_string(),
        "--jitter",
        &jitter.to_string(),
        "--seed",
        "11",
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

fn matrix(v: &Value) -> Mat3 {
    Mat3::from_fn(|i, j| v[i][j].as_f64().unwrap())
}

#[test]
fn selftest_fast_passes() {
    let out = run(&["selftest", "--fast"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS]"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["align", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["moment", "--input", "x.xyz", "--sigma", "1", "--order", "7"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.xyz");
    let out = run(&["align", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.xyz");
    std::fs::write(&bad, "2\nc\nA 1 0 0\nA 1 zero 0\n").unwrap();
    let out = run(&["align", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn align_reports_rotation_and_rmsd() {
    let dir = TempDir::new().unwrap();
    let traj = synth(dir.path(), 2, 0.1);
    let v = run_ok(&["align", traj.to_str().unwrap(), "--frame-a", "0", "--frame-b", "1"]);
    let r = matrix(&v["rotation"]);
    assert!((r * r.transpose() - Mat3::identity()).norm() < 1e-12);
    assert!((r.determinant() - 1.0).abs() < 1e-12);
    let (rmsd, aligned) = (v["rmsd"].as_f64().unwrap(), v["aligned_rmsd"].as_f64().unwrap());
    assert!(aligned <= rmsd && aligned > 0.0);

    let same = run_ok(&["align", traj.to_str().unwrap(), "--frame-a", "1", "--frame-b", "1"]);
    assert!(same["aligned_rmsd"].as_f64().unwrap() < 1e-12);
}

#[test]
fn moment_orders_and_oracle_errors() {
    let dir = TempDir::new().unwrap();
    let traj = synth(dir.path(), 1, 0.0);
    let t = traj.to_str().unwrap();
    let v = run_ok(&["moment", "--input", t, "--sigma", "0.1", "--seed", "5"]);
    let errors = &v["errors"];
    let e: Vec<f64> = ["order0", "order1", "order2"].iter().map(|k| errors[k].as_f64().unwrap()).collect();
    assert!(e[2] < e[1] && e[1] < e[0], "{e:?}");

    let o1 = run_ok(&["moment", "--input", t, "--sigma", "0.1", "--seed", "5", "--order", "1"]);
    let diff = (matrix(&o1["moment"]) - matrix(&v["moment"])).amax();
    assert!((diff - e[1]).abs() < 1e-12);
}

#[test]
fn moment_oracle_small_concentration_limit() {
    // for σ = 10·scale the posterior is nearly uniform and E[R] ≈ F/3
    let dir = TempDir::new().unwrap();
    let path = synth(dir.path(), 2, 0.2);
    let traj = load_trajectory(&path).unwrap();
    let sigma = 10.0 * traj.scale;
    let v = run_ok(&[
        "moment",
        "--input",
        path.to_str().unwrap(),
        "--sigma",
        &sigma.to_string(),
        "--observed",
        "1",
    ]);
    let f = traj.frames[1].cross_covariance(&traj.frames[0]).unwrap() / (sigma * sigma);
    let m = matrix(&v["moment"]);
    assert!(m.amax() < 0.1);
    assert!((m - f / 3.0).amax() < f.norm_squared(), "{m} vs {}", f / 3.0);
}

#[test]
fn sweep_is_reproducible_and_parses_back() {
    let dir = TempDir::new().unwrap();
    let traj = synth(dir.path(), 1, 0.0);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |out: &Path| {
        vec![
            "sweep".to_string(),
            "--input".into(),
            traj.to_str().unwrap().into(),
            "--sigmas".into(),
            "0.05,0.2".into(),
            "--n-noise".into(),
            "6".into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let out = bin().args(args(&a)).output().unwrap();
    assert!(out.status.success());
    let out = bin().args(args(&b)).env("SO3_DENOISE_THREADS", "1").output().unwrap();
    assert!(out.status.success());
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ba, bb);
    let rows = read_sweep_csv(&ba[..]).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.n_samples + r.n_excluded == 6 && r.seed == 3));
}

#[test]
fn sweep_rejects_unsorted_sigmas() {
    let dir = TempDir::new().unwrap();
    let traj = synth(dir.path(), 1, 0.0);
    let out = run(&[
        "sweep",
        "--input",
        traj.to_str().unwrap(),
        "--sigmas",
        "0.2,0.1",
        "--out",
        dir.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_sample() {
    let dir = TempDir::new().unwrap();
    let traj = synth(dir.path(), 3, 0.05);
    let metrics = dir.path().join("m.csv");
    let model = dir.path().join("model.bin");
    let train = |metrics: &Path| {
        run_ok(&[
            "train",
            "--input",
            traj.to_str().unwrap(),
            "--sigma",
            "0.5",
            "--estimator",
            "aug",
            "--steps",
            "40",
            "--mode",
            "all-frames",
            "--seed",
            "2",
            "--hidden",
            "16",
            "--out-metrics",
            metrics.to_str().unwrap(),
            "--out-model",
            model.to_str().unwrap(),
        ])
    };
    let v = train(&metrics);
    assert_eq!(v["status"], "completed");
    let rows = read_metrics_csv(std::fs::File::open(&metrics).unwrap()).unwrap();
    assert_eq!(rows.len(), 41);
    assert_eq!(rows[40].step, 40);

    let again = dir.path().join("m2.csv");
    train(&again);
    assert_eq!(std::fs::read(&metrics).unwrap(), std::fs::read(&again).unwrap());

    let (mlp, header) = load_checkpoint(&model).unwrap();
    assert_eq!((mlp.n_points(), mlp.hidden()), (8, 16));
    assert_eq!(header.seed, Some(2));

    let samples = dir.path().join("samples.xyz");
    run_ok(&[
        "sample",
        "--model",
        model.to_str().unwrap(),
        "--schedule",
        "2,1,0.5,0.1,0",
        "--seed",
        "4",
        "--n-samples",
        "3",
        "--out",
        samples.to_str().unwrap(),
    ]);
    let drawn = load_trajectory(&samples).unwrap();
    assert_eq!(drawn.frames.len(), 3);
    assert_eq!(drawn.n_points(), 8);

    let bad = run(&[
        "sample",
        "--model",
        model.to_str().unwrap(),
        "--schedule",
        "1,2,0",
        "--out",
        samples.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
