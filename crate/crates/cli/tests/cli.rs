use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_FIT: &str = "seed = 3
primitives = 16
convexes = 4
samples_per_ray = 16
n_random = 32
n_contour = 32
phase1_iters = 20
phase2_iters = 10
phase3_iters = 20
dropout_period = 10
probe_points = 1024
overlap_points = 1024
held_out = [3]
parts_resolution = 16
[init]
selection_density = 1.0
";

fn qcsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcsg")).args(args).output().expect("run qcsg")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_small(dir: &Path) {
    let o = qcsg(&["synth", "two-boxes-L", p(dir), "--size", "32", "--mesh-resolution", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_scene_lists_the_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qcsg(&["synth", "teapot", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("teapot") && err.contains("two-boxes-L") && err.contains("bowl"), "{err}");
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_small(&a);
    synth_small(&b);
    for f in ["cameras.json", "images/000.png", "masks/003.png", "gt.ply"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_fit_extract_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("tiny.toml");
    synth_small(&data);
    fs::write(&cfg, TINY_FIT).unwrap();

    let o = qcsg(&["fit", p(&data), "--out", p(&run), "--config", p(&cfg), "--mask-only"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("assembly.qcsg");
    assert!(ckpt.exists());
    for phase in 1..=3 {
        assert!(run.join(format!("previews/phase{phase}_view000.png")).exists());
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("fit_report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    // The saved config records the --mask-only override.
    assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains("mask_only = true"));

    let out = tmp.path().join("mesh");
    let o = qcsg(&["extract", p(&ckpt), p(&out), "--resolution", "24", "--scad", "fitted-box", "--ply"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["merged.obj", "merged.ply", "boxes.scad"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join("parts").is_dir());

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", p(&ckpt), p(&data), "--config", p(&cfg), "--resolution", "24", "--samples", "500"];
        args.extend_from_slice(extra);
        qcsg(&args)
    };
    let first = eval(&[]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(first.stdout, eval(&[]).stdout, "eval output must be reproducible");
    let rep: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert!(rep["cd"].is_number() && rep["nc"].is_number());
    assert_eq!(rep["seed"], 3);
    let held: Vec<_> = rep["views"].as_array().unwrap().iter().filter(|v| v["held_out"] == true).collect();
    assert_eq!(held.len(), 1);
    assert_eq!(held[0]["view"], 3);

    // Without a ground-truth mesh only image metrics are reported.
    fs::remove_file(data.join("gt.ply")).unwrap();
    let partial = eval(&[]);
    assert!(partial.status.success(), "{}", stderr(&partial));
    let rep: serde_json::Value = serde_json::from_slice(&partial.stdout).unwrap();
    assert!(rep["cd"].is_null() && rep["nc"].is_null());
    assert!(!rep["notices"].as_array().unwrap().is_empty());
    assert_eq!(rep["views"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_mask_is_reported_before_fitting() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data);
    fs::remove_file(data.join("masks/001.png")).unwrap();
    let run = tmp.path().join("run");
    let o = qcsg(&["fit", p(&data), "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("view 001") && err.contains("missing mask"), "{err}");
    assert!(!run.join("assembly.qcsg").exists());
}

#[test]
fn checkpoint_version_mismatch_names_both_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("tiny.toml");
    synth_small(&data);
    fs::write(&cfg, TINY_FIT.replace("phase1_iters = 20", "phase1_iters = 2")).unwrap();
    let o = qcsg(&["fit", p(&data), "--out", p(&run), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("assembly.qcsg");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&ckpt, bytes).unwrap();
    let o = qcsg(&["extract", p(&ckpt), p(&tmp.path().join("mesh"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("file has 7") && err.contains("reads 1"), "{err}");
}

#[test]
fn grad_check_passes_and_flags_a_corrupted_node() {
    let o = qcsg(&["grad-check", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("all gradient checks passed"));

    let o = qcsg(&["grad-check", "--seed", "4", "--corrupt", "union-soft"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("union-soft"), "{err}");
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(qcsg(&["fit"]).status.code(), Some(1));
    let o = qcsg(&["grad-check", "--corrupt", "no-such-node"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
