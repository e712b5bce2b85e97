use std::path::Path;
use std::process::{Command, Output};

fn koopcycle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopcycle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_fit_loop_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("orbit.traj");
    let model = dir.path().join("orbit.koop");
    let cyc = dir.path().join("orbit.cyc");
    let csv = dir.path().join("table.csv");

    let out = koopcycle(&["gen", "nbody", "--frames", "201", "--seed", "11", "--out", path(&traj)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = koopcycle(&["fit", path(&traj), "--rank", "3", "--out", path(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(fit["r"], 3);
    assert_eq!(fit["n"], 30);

    let out = koopcycle(&[
        "loop", path(&traj), "--rank", "3", "--metrics", "json", "--csv", path(&csv), "--out", path(&cyc),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let row: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(row["period"], 200);
    assert_eq!(row["m"], 16);
    assert!(row["closure_residual"].as_f64().unwrap() < 1e-8);
    assert!(row["loop_seam_gap"].as_f64().unwrap() < row["raw_seam_gap"].as_f64().unwrap());

    let out = koopcycle(&["loop", path(&traj), "--model", path(&model), "--csv", path(&csv), "--out", path(&cyc)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("input,n,r,T,m,"));

    let out = koopcycle(&["eval", path(&cyc), path(&traj)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["full_closure"].as_f64().unwrap() < 1e-6);
}

#[test]
fn gen_grids_and_configs() {
    let dir = tempfile::tempdir().unwrap();
    let water = dir.path().join("water.traj");
    let out = koopcycle(&["gen", "water", "--grid", "20x16", "--frames", "41", "--out", path(&water)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = koopcycle::trajectory::Trajectory::load(&water).unwrap();
    assert_eq!(t.dim(), 3 * 20 * 16);
    assert_eq!(t.frame_count(), 41);

    let cfg = dir.path().join("sheet.json");
    let sheet = koopcycle::datagen::PinnedSheetConfig {
        steps: 30,
        ..Default::default()
    };
    std::fs::write(&cfg, serde_json::to_string(&sheet).unwrap()).unwrap();
    let out_path = dir.path().join("sheet.traj");
    let out = koopcycle(&["gen", "cloth", "--config", path(&cfg), "--grid", "6x5", "--out", path(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = koopcycle::trajectory::Trajectory::load(&out_path).unwrap();
    assert_eq!(t.frame_count(), 31);
    assert_eq!(t.dim(), 6 * 6 * 5);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("x.traj");
    for args in [
        vec!["gen", "teapot", "--out", path(&out_path)],
        vec!["gen", "water", "--grid", "banana", "--out", path(&out_path)],
        vec!["gen", "nbody", "--frames", "1", "--out", path(&out_path)],
        vec!["loop", "/nonexistent/input.traj", "--out", path(&out_path)],
        vec!["eval", "/nonexistent/a.cyc", "/nonexistent/b.traj"],
        vec!["serve", "--model-dir", "/nonexistent/models"],
    ] {
        let out = koopcycle(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn numerical_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("stiff.json");
    let sheet = koopcycle::datagen::PinnedSheetConfig {
        stiffness: 1e7,
        substeps: 1,
        ..Default::default()
    };
    std::fs::write(&cfg, serde_json::to_string(&sheet).unwrap()).unwrap();
    let out = koopcycle(&["gen", "sheet", "--config", path(&cfg), "--out", path(&dir.path().join("s.traj"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
