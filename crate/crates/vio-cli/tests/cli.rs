//! End-to-end checks of the benchmark commands: reproducibility of the
//! written artifacts, trace toggles, and comparison-table handling.

use std::fs;
use std::path::Path;
use std::process::Command;

use nalgebra::Vector3;
use vio_core::{
    ClusterMotion, ClusterSpec, ImuNoiseParams, LandmarkBlock, Method, Scenario,
};

use vio_cli::{
    compare_cmd, metrics_cmd, run_cmd, simulate_cmd, RunOptions, TraceKind,
};

/// A fast, fully specified scenario for tests, written as a TOML file.
fn small_scenario(dir: &Path, name: &str) -> std::path::PathBuf {
    let sc = Scenario {
        name: name.to_string(),
        duration: 4.0,
        imu_rate: 200.0,
        cam_rate: 20.0,
        gravity: 9.81,
        position_knots: vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.5, 0.3, 0.03),
            Vector3::new(1.0, -0.3, 0.06),
            Vector3::new(1.5, 0.0, 0.0),
        ],
        orientation_knots_rpy: vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.01, -0.01, 0.1),
            Vector3::new(-0.01, 0.01, -0.1),
            Vector3::new(0.0, 0.0, 0.0),
        ],
        imu_noise: ImuNoiseParams::default(),
        pixel_noise: 0.5,
        accel_bias: Vector3::new(0.01, -0.008, 0.005),
        gyro_bias: Vector3::new(0.001, -0.0005, 0.0008),
        camera: vio_core::CameraModel::default_vga(),
        max_features: 120,
        min_visible_warn: 20,
        static_blocks: vec![
            LandmarkBlock {
                center: Vector3::new(7.0, 0.0, 0.5),
                extent: Vector3::new(0.1, 4.0, 2.0),
                count: 90,
            },
            LandmarkBlock {
                center: Vector3::new(3.5, -3.0, 0.5),
                extent: Vector3::new(3.5, 0.1, 1.5),
                count: 40,
            },
            LandmarkBlock {
                center: Vector3::new(3.5, 3.0, 0.5),
                extent: Vector3::new(3.5, 0.1, 1.5),
                count: 40,
            },
        ],
        clusters: vec![ClusterSpec {
            block: LandmarkBlock {
                center: Vector3::new(5.0, 1.0, 0.3),
                extent: Vector3::new(0.6, 0.8, 0.6),
                count: 25,
            },
            motion: ClusterMotion::ConstantVelocity {
                velocity: Vector3::new(-0.02, 0.08, 0.01),
            },
        }],
    };
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, toml::to_string_pretty(&sc).unwrap()).unwrap();
    path
}

fn run_once(scenario: &Path, method: Method, out: &Path, traces: Vec<TraceKind>) {
    run_cmd(&RunOptions {
        scenario: scenario.to_string_lossy().into_owned(),
        method,
        seeds: vec![3],
        out: out.to_path_buf(),
        traces,
    })
    .unwrap();
}

#[test]
fn repeated_runs_write_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_scenario(tmp.path(), "small");
    let all = vec![TraceKind::Weights, TraceKind::Bias, TraceKind::Bcc];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_once(&scenario, Method::AtlsBccSsr, &a, all.clone());
    run_once(&scenario, Method::AtlsBccSsr, &b, all);
    for file in ["est.csv", "gt.csv", "weights.csv", "bias.csv", "bcc.csv"] {
        let fa = fs::read(a.join("seed_3").join(file)).unwrap();
        let fb = fs::read(b.join("seed_3").join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical runs");
    }
}

#[test]
fn trace_flags_gate_the_diagnostic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_scenario(tmp.path(), "small");
    let with = tmp.path().join("with");
    let without = tmp.path().join("without");
    run_once(&scenario, Method::Atls, &with, vec![TraceKind::Weights, TraceKind::Bcc]);
    run_once(&scenario, Method::Atls, &without, vec![]);
    assert!(with.join("seed_3/weights.csv").exists());
    assert!(with.join("seed_3/bcc.csv").exists());
    assert!(!with.join("seed_3/bias.csv").exists());
    assert!(!without.join("seed_3/weights.csv").exists());
    assert!(!without.join("seed_3/bcc.csv").exists());
    assert!(without.join("seed_3/est.csv").exists());
}

#[test]
fn compare_merges_methods_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_scenario(tmp.path(), "small");
    let a = tmp.path().join("plain");
    let b = tmp.path().join("robust");
    run_once(&scenario, Method::PlainLs, &a, vec![]);
    run_once(&scenario, Method::Atls, &b, vec![]);
    let merged = tmp.path().join("merged.csv");
    let table = compare_cmd(&[a, b], Some(&merged)).unwrap();
    assert!(table.contains("plain_ls"));
    assert!(table.contains("atls"));
    assert!(table.contains("scenario: small"));
    let rows = vio_cli::io::read_metrics_csv(&merged).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn compare_refuses_mismatched_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let sa = small_scenario(tmp.path(), "alpha");
    let sb = small_scenario(tmp.path(), "beta");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_once(&sa, Method::PlainLs, &a, vec![]);
    run_once(&sb, Method::PlainLs, &b, vec![]);
    let err = compare_cmd(&[a, b], None).unwrap_err();
    assert!(err.to_string().contains("different scenarios"), "{err}");
}

#[test]
fn simulate_writes_readable_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_scenario(tmp.path(), "small");
    let out = tmp.path().join("sim");
    let summary = simulate_cmd(scenario.to_str().unwrap(), 5, &out).unwrap();
    assert!(summary.contains("frames"));
    let imu = vio_cli::io::read_imu_csv(&out.join("imu.csv")).unwrap();
    let frames = vio_cli::io::read_frames_csv(&out.join("frames.csv")).unwrap();
    let gt = vio_cli::io::read_states_csv(&out.join("gt.csv")).unwrap();
    assert_eq!(imu.len(), 801); // 4 s at 200 Hz, inclusive
    assert_eq!(gt.len(), 81); // 4 s at 20 Hz, inclusive
    assert_eq!(frames.len(), gt.len());
    assert!(out.join("scenario.toml").exists());
}

#[test]
fn metrics_recomputes_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_scenario(tmp.path(), "small");
    let out = tmp.path().join("run");
    run_once(&scenario, Method::PlainLs, &out, vec![]);
    let report = metrics_cmd(&out).unwrap();
    assert!(report.contains("seed_3"), "{report}");
    assert!(report.contains("ate_rmse"), "{report}");
}

#[test]
fn binary_surface_works_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = small_scenario(tmp.path(), "small");
    let out = tmp.path().join("bin_run");
    let status = Command::new(env!("CARGO_BIN_EXE_vio"))
        .args([
            "run",
            scenario.to_str().unwrap(),
            "--method",
            "huber",
            "--seeds",
            "1",
            "--out",
            out.to_str().unwrap(),
            "--trace",
            "weights",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("seed_1/weights.csv").exists());
    let output = Command::new(env!("CARGO_BIN_EXE_vio"))
        .args(["metrics", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("ate_rmse"));
}
