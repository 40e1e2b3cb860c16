use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoreg::grid::{Dims, Spacing};
use protoreg::io;
use protoreg::volume::{LabelVolume, Volume};
use protoreg::warp::DisplacementField;
use protoreg_cli::manifest::RunManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protoreg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: [&str; 8] = ["--preset", "phantom", "--levels", "2", "--iterations", "30,15", "--lncc-window", "5"];

fn phantom_dir(dir: &Path, spec: &str) -> PathBuf {
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, spec).unwrap();
    let out = dir.join("ph");
    let o = run(&["phantom", "--spec", s(&spec_path), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn small_phantom(dir: &Path) -> PathBuf {
    phantom_dir(dir, r#"{"dims": [24, 24, 24], "blobs": 2, "magnitude": 2, "seed": 3}"#)
}

fn register_args(ph: &Path, out: &Path, masks: bool) -> Vec<String> {
    let mut a: Vec<String> = vec![
        "register".into(),
        "--fixed".into(),
        s(&ph.join("fixed.f32raw")).into(),
        "--moving".into(),
        s(&ph.join("moving.f32raw")).into(),
        "--out-dir".into(),
        s(out).into(),
    ];
    if masks {
        a.extend([
            "--fixed-mask".into(),
            s(&ph.join("fixed_labels.f32raw")).into(),
            "--moving-mask".into(),
            s(&ph.join("moving_labels.f32raw")).into(),
        ]);
    }
    a.extend(FAST.iter().map(|x| x.to_string()));
    a
}

// Artifacts in a run directory, counting a raw payload and its sidecar once.
fn artifacts(dir: &Path) -> Vec<String> {
    let names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let mut out: Vec<String> = names
        .iter()
        .filter(|n| {
            let sidecar = n.strip_suffix(".json").map(|st| names.contains(&format!("{st}.f32raw")));
            sidecar != Some(true)
        })
        .cloned()
        .collect();
    out.sort();
    out
}

#[test]
fn register_writes_six_artifacts_and_a_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let out = dir.path().join("run");
    let o = bin().args(register_args(&ph, &out, true)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        artifacts(&out),
        [
            "eval_report.json",
            "field.f32raw",
            "loss_breakdown.json",
            "manifest.json",
            "warped.f32raw",
            "warped_labels.f32raw"
        ]
    );
    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert!(m.stale().unwrap().is_empty());
    assert_eq!(m.inputs.len(), 8);
    assert_eq!(m.config["lncc_window"], 5);
    let breakdown: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("loss_breakdown.json")).unwrap()).unwrap();
    assert!(breakdown["total"].is_f64());
    fs::write(ph.join("fixed.f32raw"), b"tampered").unwrap();
    assert_eq!(m.stale().unwrap().len(), 1);
}

#[test]
fn register_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bin().args(register_args(&ph, out, true)).output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["field.f32raw", "field.json", "warped.f32raw", "warped_labels.f32raw", "loss_breakdown.json", "eval_report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_masks_warn_and_proceed() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let out = dir.path().join("run");
    let o = bin().args(register_args(&ph, &out, false)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("unsupervised mode: ω₃,ω₄,ω₅ disabled"));
    assert!(!out.join("warped_labels.f32raw").exists());
    assert!(out.join("field.f32raw").exists());
}

#[test]
fn argument_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let out = dir.path().join("run");
    let mut a = register_args(&ph, &out, false);
    a.extend(["--fixed-mask".into(), s(&ph.join("fixed_labels.f32raw")).into()]);
    assert_eq!(code(&bin().args(&a).output().unwrap()), 2);

    let mut a = register_args(&ph, &out, true);
    a.extend(["--w-sim".into(), "-1".into()]);
    assert_eq!(code(&bin().args(&a).output().unwrap()), 2);

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"levels": 2, "colour": "blue"}"#).unwrap();
    let mut a = register_args(&ph, &out, true);
    a.drain(a.len() - FAST.len()..);
    a.extend(["--config".into(), s(&cfg).into()]);
    assert_eq!(code(&bin().args(&a).output().unwrap()), 2);

    assert_eq!(code(&run(&["register"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"levels": 2, "iterations": [10, 5], "adam": {"learning_rate": 0.05}, "lncc_window": 5, "temperature": 0.5}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let mut a = register_args(&ph, &out, true);
    a.drain(a.len() - FAST.len()..);
    a.extend(["--config", s(&cfg), "--temperature", "0.25", "--seed", "9"].map(String::from));
    let o = bin().args(&a).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.config["temperature"], 0.25);
    assert_eq!(m.config["iterations"], serde_json::json!([10, 5]));
    assert_eq!(m.seed, 9);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let out = dir.path().join("run");

    let mut a = register_args(&ph, &out, false);
    a[2] = s(&dir.path().join("absent.f32raw")).into();
    let o = bin().args(&a).output().unwrap();
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("absent"));

    let payload = ph.join("moving.f32raw");
    let bytes = fs::read(&payload).unwrap();
    fs::write(&payload, &bytes[..bytes.len() / 2]).unwrap();
    let o = bin().args(register_args(&ph, &out, false)).output().unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("truncated"));

    fs::write(ph.join("fixed.json"), "{ not json").unwrap();
    assert_eq!(code(&bin().args(register_args(&ph, &out, false)).output().unwrap()), 3);
}

#[test]
fn divergence_exits_4_and_names_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let mut a = register_args(&ph, &dir.path().join("run"), true);
    a.extend(["--learning-rate", "1e300"].map(String::from));
    let o = bin().args(&a).output().unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("smooth"), "{}", stderr(&o));
}

fn write_labels(path: &Path, dims: Dims, l: Vec<u16>, k: usize) -> LabelVolume {
    let lv = LabelVolume::new(dims, Spacing::UNIT, l, k).unwrap();
    io::write_labels(&lv, path).unwrap();
    lv
}

#[test]
fn eval_identical_masks_and_zero_field() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::cube(6);
    let m = dir.path().join("mask.f32raw");
    write_labels(&m, dims, dims.iter().map(|(_, p)| (p[0] / 2) as u16).collect(), 2);
    let f = dir.path().join("zero.f32raw");
    io::write_field(&DisplacementField::zeros(dims, Spacing::UNIT), &f).unwrap();
    let csv = dir.path().join("eval.csv");
    let o = run(&["eval", "--fixed-mask", s(&m), "--warped-mask", s(&m), "--field", s(&f), "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("pair_id,class_name,dsc,avg_dsc,sdlogj"));
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(&cells[2..], ["1", "1", "0"]);
    }
    assert!(dir.path().join("eval.json").exists());
}

#[test]
fn eval_matches_a_recount_before_registration() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let zero = dir.path().join("zero.f32raw");
    let fixed = io::read_labels(&ph.join("fixed_labels.f32raw")).unwrap();
    io::write_field(&DisplacementField::zeros(fixed.dims(), Spacing::UNIT), &zero).unwrap();
    let moving = io::read_labels(&ph.join("moving_labels.f32raw")).unwrap();
    let csv = dir.path().join("e.csv");
    let o = run(&[
        "eval",
        "--fixed-mask",
        s(&ph.join("fixed_labels.f32raw")),
        "--warped-mask",
        s(&ph.join("moving_labels.f32raw")),
        "--field",
        s(&zero),
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut scores = Vec::new();
    for k in 1..=fixed.num_classes() as u16 {
        let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
        for (x, y) in fixed.labels().iter().zip(moving.labels()) {
            a += usize::from(*x == k);
            b += usize::from(*y == k);
            both += usize::from(*x == k && *y == k);
        }
        scores.push(2.0 * both as f64 / (a + b) as f64);
    }
    let want = scores.iter().sum::<f64>() / scores.len() as f64;
    let text = fs::read_to_string(&csv).unwrap();
    let avg: f64 = text.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((avg - want).abs() < 1e-12, "{avg} vs {want}");
}

#[test]
fn eval_missing_field_exits_3_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::cube(4);
    let m = dir.path().join("mask.f32raw");
    write_labels(&m, dims, vec![1; dims.len()], 1);
    let missing = dir.path().join("nowhere_field.f32raw");
    let o = run(&["eval", "--fixed-mask", s(&m), "--warped-mask", s(&m), "--field", s(&missing), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere_field"));
}

#[test]
fn slices_render_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(5, 4, 3);
    let v = dir.path().join("v.f32raw");
    io::write_volume(&Volume::zeros(dims, Spacing::UNIT), &v).unwrap();
    let l = dir.path().join("l.f32raw");
    let mut labels = vec![0u16; dims.len()];
    labels[dims.index(2, 1, 1)] = 1;
    write_labels(&l, dims, labels, 1);
    let out = dir.path().join("s.ppm");

    let o = run(&["slices", "--volume", s(&v), "--axis", "z", "--index", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bytes = fs::read(&out).unwrap();
    let header = b"P6\n5 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|b| *b == 0));

    let o = run(&["slices", "--volume", s(&v), "--labels", s(&l), "--axis", "z", "--index", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let px = &fs::read(&out).unwrap()[header.len()..];
    let colored: Vec<usize> = (0..20).filter(|i| px[3 * i..3 * i + 3] != [0, 0, 0]).collect();
    assert_eq!(colored, vec![1 * 5 + 2]);

    assert_eq!(code(&run(&["slices", "--volume", s(&v), "--axis", "w", "--index", "0", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["slices", "--volume", s(&v), "--axis", "x", "--index", "9", "--out", s(&out)])), 2);
}

#[test]
fn ablate_without_motion_scores_near_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"dims": [24, 24, 24], "blobs": 2, "magnitude": 0, "seed": 1}"#).unwrap();
    let out = dir.path().join("ablation.csv");
    let o = run(&["ablate", "--phantom-spec", s(&spec), "--out", s(&out), "--levels", "2", "--iterations", "20,10", "--lncc-window", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "config,prototype,contour,dsc,sdlogj");
    assert_eq!(lines.len(), 4);
    let flags: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[1], c[2])
        })
        .collect();
    assert_eq!(flags, [("✗", "✗"), ("✓", "✗"), ("✓", "✓")]);
    for l in &lines[1..] {
        let dsc: f64 = l.split(',').nth(3).unwrap().parse().unwrap();
        assert!(dsc > 0.97, "{l}");
    }
}

#[test]
fn check_grad_and_demo_attention() {
    let o = run(&["check-grad"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.matches(" pass").count(), 6, "{table}");

    let o = run(&["demo-attention"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("fusion"));
    assert!(text.contains("window 3: (3,3) (0,3) (3,0) (0,0)"));
}

#[test]
fn phantom_writes_truth_field() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path());
    let truth = io::read_field(&ph.join("truth_field.f32raw")).unwrap();
    assert_eq!(truth.dims(), Dims::cube(24));
    assert!(truth.max_norm() > 1.0);
}
