use std::path::Path;
use std::process::{Command, Output};

fn m2d(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_m2d"));
    cmd.args(args).env_remove("M2D_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn count(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn synth_writes_every_camera_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let o = m2d(&["synth", "--seed", "5", "--out", d.to_str().unwrap()], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(count(&a.join("images"), "ppm"), 12);
    assert_eq!(count(&a.join("depth"), "pfm"), 12);
    for f in ["rig.json", "scene.json", "pose.json", "images/cam3_prev.ppm", "depth/cam5_curr.pfm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&m2d(&["synth", "--out", data.to_str().unwrap()], &[])), 0);
    let d = data.to_str().unwrap();
    let o = m2d(&["eval", d, d], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["mean"]["Abs.Rel"], 0.0);
    assert_eq!(report["mean"]["RMSE"], 0.0);
    assert_eq!(report["mean"]["d<1.25"], 1.0);
    assert_eq!(report["per_camera"].as_array().unwrap().len(), 6);
}

#[test]
fn estimate_reads_a_dataset_named_in_a_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&m2d(&["synth", "--out", data.to_str().unwrap()], &[])), 0);
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"input": {"mode": "images", "dir": "data"}, "estimate": {"bins": 8}}"#,
    )
    .unwrap();
    let out = tmp.path().join("est");
    let o = m2d(
        &["estimate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ablation", "temporal_only,vff"],
        &[("M2D_THREADS", "1")],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(count(&out.join("depth"), "pfm"), 6);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pose_source"], "ground_truth");
    assert_eq!(report["options"]["bins"], 8);
    assert_eq!(report["options"]["stf"], "temporal_only");
}

#[test]
fn configuration_problems_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(code(&m2d(&["synth", "--out", o, "--ablation", "warp_drive"], &[])), 2);
    assert_eq!(code(&m2d(&["synth"], &[])), 2);
    assert_eq!(code(&m2d(&["synth", "--out", o], &[("M2D_THREADS", "0")])), 2);
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"estimate": {"bins": 0}}"#).unwrap();
    assert_eq!(code(&m2d(&["synth", "--out", o, "--config", cfg.to_str().unwrap()], &[])), 2);
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(code(&m2d(&["synth", "--out", o, "--config", cfg.to_str().unwrap()], &[])), 2);
    let missing = tmp.path().join("nothing");
    let m = missing.to_str().unwrap();
    assert_eq!(code(&m2d(&["eval", m, m], &[])), 2);
}
