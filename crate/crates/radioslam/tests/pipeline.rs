//! End-to-end pipeline tests through the CLI binary and the library
//! harness: validate/run/metrics/plotdata round trips, rerun determinism,
//! and SLAM with dead-reckoned IMU controls corrected by radio updates.

use std::path::Path;
use std::process::Command;

use nalgebra::Vector2;
use tempfile::tempdir;

use radioslam::beam::imu_odometry;
use radioslam::geometry::{AaRect, Environment, Point2, WallSegment};
use radioslam::measurement::{clutter_toa_window, enumerate_paths, observe, NoiseProfile, UEState};
use radioslam::rng::{stream, StreamTag};
use radioslam::slam::{SlamConfig, SlamEngine};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radioslam"))
}

#[test]
fn validate_accepts_bundled_default() {
    let out = bin().arg("validate").output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn validate_rejects_bad_scenario_with_violation_list() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        r#"
name = "bad"
horizon = 0
seeds = 0

[environment]
bounds_min = [0.0, 0.0]
bounds_max = [10.0, 8.0]

[[environment.walls]]
id = "south"
a = [0.0, 0.0]
b = [10.0, 0.0]

[[environment.pas]]
id = "pa1"
position = [2.0, 6.0]

[[ues]]
id = 1

[ues.track]
kind = "waypoints"
points = [[4.0, 2.0], [4.5, 2.0]]
"#,
    )
    .unwrap();
    let out = bin().arg("validate").arg("--scenario").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let violations: Vec<&str> = stderr
        .lines()
        .filter(|l| l.starts_with("violation,"))
        .collect();
    assert!(violations.len() >= 2, "expected machine-readable violations, got: {stderr}");
    assert!(stderr.contains("horizon"));
    assert!(stderr.contains("seeds"));
}

#[test]
fn run_metrics_plotdata_round_trip() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["run", "--preset", "custom", "--seeds", "2", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for name in ["series.csv", "snapshot.txt", "config.toml", "report.txt"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }

    let series = std::fs::read_to_string(out_dir.join("series.csv")).unwrap();
    let mut lines = series.lines();
    assert_eq!(lines.next(), Some("experiment,mechanism,seed,epoch,metric,value"));
    assert!(lines.next().is_some(), "series.csv has no data rows");

    let metrics = bin().args(["metrics", "--in"]).arg(&out_dir).output().unwrap();
    assert!(metrics.status.success());
    let metrics_out = String::from_utf8_lossy(&metrics.stdout);
    assert!(metrics_out.starts_with("experiment,mechanism,metric,final_epoch,mean,seeds"));
    assert!(metrics_out.lines().count() > 1);

    let plot = bin().args(["plotdata", "--in"]).arg(&out_dir).output().unwrap();
    assert!(plot.status.success());
    let plot_out = String::from_utf8_lossy(&plot.stdout);
    // tidy rows plus a mean pseudo-seed per (mechanism, epoch, metric)
    assert!(plot_out.lines().any(|l| l.split(',').nth(2) == Some("mean")));
}

#[test]
fn run_rejects_unknown_preset() {
    let dir = tempdir().unwrap();
    let out = bin()
        .args(["run", "--preset", "nope", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("violation,"));
}

#[test]
fn cli_reruns_are_byte_identical() {
    let dir = tempdir().unwrap();
    let run = |name: &str| -> std::path::PathBuf {
        let out_dir = dir.path().join(name);
        let out = bin()
            .args(["run", "--preset", "custom", "--seeds", "2", "--out"])
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success());
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for name in ["series.csv", "snapshot.txt", "config.toml"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical runs");
    }
}

#[test]
fn run_honors_external_scenario_file() {
    let dir = tempdir().unwrap();
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/default.toml");
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["run", "--preset", "custom", "--seeds", "1", "--scenario"])
        .arg(&scenario)
        .args(["--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // the config echo is the exact input text
    let echo = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    let original = std::fs::read_to_string(&scenario).unwrap();
    assert_eq!(echo, original);
}

/// Dead-reckoning on noisy IMU odometry drifts without bound; feeding the
/// same controls into the SLAM engine with radio updates keeps the
/// position error bounded well below the accumulated drift.
#[test]
fn imu_controls_with_radio_updates_bound_position_error() {
    let env = Environment {
        walls: vec![
            WallSegment::new("south", Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)).unwrap(),
            WallSegment::new("east", Point2::new(10.0, 0.0), Point2::new(10.0, 8.0)).unwrap(),
            WallSegment::new("north", Point2::new(10.0, 8.0), Point2::new(0.0, 8.0)).unwrap(),
            WallSegment::new("west", Point2::new(0.0, 8.0), Point2::new(0.0, 0.0)).unwrap(),
        ],
        pas: vec![("pa1".into(), Point2::new(2.0, 6.0))],
        scatterers: vec![],
        bounds: AaRect::new(Point2::new(0.0, 0.0), Point2::new(10.0, 8.0)),
    };
    let horizon = 40u64;
    let track: Vec<UEState> = (0..=horizon)
        .map(|e| {
            let t = e as f64 * std::f64::consts::TAU / 40.0;
            UEState {
                position: Point2::new(5.0 + 2.0 * t.cos(), 4.0 + 1.5 * t.sin()),
                velocity: Vector2::zeros(),
                clock_bias: 0.0,
                orientation: 0.0,
            }
        })
        .collect();
    let noise = NoiseProfile::default();
    let mut imu_rng = stream(3, 1, 0, StreamTag::Imu);
    let controls = imu_odometry(&track, 0.05, 0.02, &mut imu_rng);

    // pure dead reckoning from the same controls
    let mut dr = track[0].position;
    let mut dr_errs = Vec::new();
    for (e, c) in controls.iter().enumerate() {
        dr += c;
        dr_errs.push((dr - track[e + 1].position).norm());
    }
    let dr_final = *dr_errs.last().unwrap();

    let cfg = SlamConfig {
        n_particles: 300,
        accel_noise: 0.3,
        ..SlamConfig::default()
    };
    let mut eng = SlamEngine::new(cfg, noise, track[0], 3, 1);
    eng.init_known_pas(&env.pas);
    let window = clutter_toa_window(&env);
    let mut slam_errs = Vec::new();
    for epoch in 1..=horizon {
        let truth = &track[epoch as usize];
        let paths = enumerate_paths(&env, truth, &noise);
        let mut rng = stream(3, 1, epoch, StreamTag::Observe);
        let meas = observe(&paths, truth, &noise, window, epoch, &mut rng);
        let s = eng.step(1.0, &meas, window, Some(controls[(epoch - 1) as usize]));
        slam_errs.push((s.ue_estimate.position - truth.position).norm());
    }
    let slam_final = *slam_errs.last().unwrap();
    let slam_max = slam_errs.iter().copied().fold(0.0f64, f64::max);

    assert!(
        dr_final > 0.3,
        "drift too small to be a meaningful baseline: {dr_final:.3} m"
    );
    assert!(
        slam_final < dr_final / 2.0,
        "radio updates did not correct the drift: slam {slam_final:.3} m vs dead reckoning {dr_final:.3} m"
    );
    assert!(slam_max < 1.0, "position error unbounded: max {slam_max:.3} m");
}
