use std::path::Path;
use std::process::{Command, Output};

fn planesweep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planesweep"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = planesweep(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_run_fuse_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--out-dir", "data"], d);
    for f in ["images/00000002.pfm", "cams/00000000_cam.txt", "depths_gt/00000001.pfm", "gt.ply", "config.txt"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let run = ok(&["run", "--data", "data", "--out-dir", "run"], d);
    assert!(metric(&run, "stage3.depth_mae") < 0.03125);
    ok(&["fuse", "--data", "run", "--out-dir", "run"], d);
    let eval = ok(&["eval", "--recon", "run/fused.ply", "--gt", "data/gt.ply", "--out-dir", "run"], d);
    assert!(metric(&eval, "overall") < 0.05);
    let render = ok(&["render", "--data", "run", "--out-dir", "run"], d);
    assert!(metric(&render, "reference_from1.coverage") > 0.5);
    assert!(d.join("run/rendered/reference_smoothed.pfm").exists());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for t in ["1", "3"] {
        ok(&["run", "--threads", t, "--out-dir", t], d);
    }
    for f in ["metrics.txt", "depths/00000000.pfm", "depths/00000002.pfm", "stage1_depth.pfm"] {
        let a = std::fs::read(d.join("1").join(f)).unwrap();
        let b = std::fs::read(d.join("3").join(f)).unwrap();
        assert!(a == b, "{f} differs between thread counts");
    }
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.txt"), "# small run\nscene.num_views = 4\nstage2.num_hypotheses = 16\n").unwrap();
    ok(&["synth", "--config", "c.txt", "--seed", "5", "--set", "scene.noise_sigma=0", "--out-dir", "data"], d);
    let cfg = std::fs::read_to_string(d.join("data/config.txt")).unwrap();
    assert!(cfg.contains("scene.seed = 5\n"));
    assert!(cfg.contains("scene.noise_sigma = 0.0\n"));
    assert!(cfg.contains("stage2.num_hypotheses = 16\n"));
    assert!(d.join("data/images/00000003.pfm").exists());

    std::fs::write(d.join("bad.txt"), "seed = 1\nstage9.num_hypotheses = 4\n").unwrap();
    let out = planesweep(&["synth", "--config", "bad.txt"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 9"));
    let out = planesweep(&["synth", "--set", "nonsense"], d);
    assert!(!out.status.success());
}

#[test]
fn refine_with_zero_steps_keeps_the_start() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let text = ok(&["refine", "--set", "refine.steps=0", "--out-dir", "r"], d);
    assert_eq!(metric(&text, "steps"), 0.0);
    assert_eq!(metric(&text, "loss_initial"), metric(&text, "loss_final"));
    assert_eq!(metric(&text, "mae_initial"), metric(&text, "mae_final"));
    assert_eq!(
        std::fs::read(d.join("r/initial_depth.pfm")).unwrap(),
        std::fs::read(d.join("r/refined_depth.pfm")).unwrap()
    );
}

#[test]
fn refine_needs_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["run", "--out-dir", "run"], d);
    let out = planesweep(&["refine", "--data", "run"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("depths_gt"));
}
