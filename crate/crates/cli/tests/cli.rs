use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gsfusion(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsfusion")).args(args).current_dir(cwd).env_remove("GSFUSION_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, frames: &str) {
    let o = gsfusion(&["synth", "plane-box", "--out", "data", "--frames", frames, "--sphere-level", "2"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_run_mesh_render_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "5");
    for f in ["rgb.txt", "depth.txt", "groundtruth.txt", "intrinsics.txt", "gt_mesh.ply"] {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }

    let o = gsfusion(&["run", "data", "--out", "run", "--seed", "4"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trajectory.txt", "surfels.ply", "timing.csv", "losses.csv", "config.toml", "run.toml"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
    let traj = fs::read_to_string(d.join("run/trajectory.txt")).unwrap();
    assert_eq!(traj.lines().count(), 5);

    let o = gsfusion(&["mesh", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("run/mesh.ply").is_file());

    let o = gsfusion(&["render", "run", "--frame", "2", "--out", "view"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("view_color.png").is_file() && d.join("view_depth.png").is_file());

    let o = gsfusion(&["eval", "run", "--gt", "data", "--samples", "2000", "--view-stride", "2"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = stdout(&o);
    for key in ["ate_rmse_cm", "accuracy_cm", "accuracy_ratio_pct", "psnr_db", "ssim"] {
        assert!(report.contains(key), "{report}");
    }
    assert!(d.join("run/report.txt").is_file());
}

#[test]
fn eval_of_groundtruth_trajectory_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "3");
    assert!(gsfusion(&["run", "data", "--out", "run"], d).status.success());
    fs::copy(d.join("data/groundtruth.txt"), d.join("run/trajectory.txt")).unwrap();
    let o = gsfusion(&["eval", "run", "--gt", "data", "--samples", "1000"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l == "ate_rmse_cm 0.00"), "{}", stdout(&o));
}

#[test]
fn missing_rgb_index_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "2");
    fs::remove_file(d.join("data/rgb.txt")).unwrap();
    let o = gsfusion(&["run", "data"], d);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("rgb.txt"), "{}", stderr(&o));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "2");
    fs::write(d.join("bad.toml"), "[surfel]\nstride = 0\n").unwrap();
    let o = gsfusion(&["run", "data", "--config", "bad.toml"], d);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    fs::write(d.join("typo.toml"), "[surfel]\nstrdie = 2\n").unwrap();
    let o = gsfusion(&["run", "data", "--config", "typo.toml"], d);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_preset_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gsfusion(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(gsfusion(&["synth", "castle", "--out", "x"], tmp.path()).status.code(), Some(2));
}

#[test]
fn thread_override_must_be_numeric() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "2");
    let o = Command::new(env!("CARGO_BIN_EXE_gsfusion")).args(["run", "data"]).current_dir(d).env("GSFUSION_THREADS", "many").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
