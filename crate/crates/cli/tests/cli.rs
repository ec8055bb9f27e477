use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mednca::checkpoint;
use mednca::datasets::pgm;
use mednca::datasets::{load_manifest, load_split, Split};

fn mednca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mednca"))
        .args(args)
        .env("MEDNCA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mednca(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small model so the end-to-end commands stay quick.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.json");
    let cfg = serde_json::json!({
        "model": {"channels": 8, "hidden": 16, "steps_level1": 6, "steps_level2": 4},
        "train": {"batch_size": 2, "patch_size": 16, "val_every": 0},
        "adapt": {"n_runs": 3, "batch_size": 2},
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn synth(dir: &Path, name: &str, seed: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", s(&out), "--train", "3", "--val", "1", "--test", "2", "--size", "16", "--seed", seed];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            let bytes = std::fs::read(&p).unwrap();
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out
}

#[test]
fn synth_is_deterministic_and_shift_only_touches_images() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "a", "3", &["--shift", "phone_capture"]);
    let b = synth(tmp.path(), "b", "3", &["--shift", "phone_capture"]);
    let c = synth(tmp.path(), "c", "4", &[]);
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
    let base = files(&a);
    let shifted = files(&a.join("phone_capture"));
    assert_eq!(base.len(), shifted.len());
    for ((p, x), (q, y)) in base.iter().zip(&shifted) {
        assert_eq!(p, q);
        if p.starts_with("masks") {
            assert_eq!(x, y, "{}", p.display());
        } else {
            assert_ne!(x, y, "{}", p.display());
        }
    }
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["shift"]["name"], "phone_capture");
}

#[test]
fn shift_from_file_and_bad_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    let text = serde_json::json!({
        "name": "dim", "gamma_correction": 1.0, "contrast_scale": 0.5,
        "gaussian_noise_sigma": 0.0, "bias_field_strength": 0.0, "moire": null, "seed": 1
    });
    std::fs::write(&spec, text.to_string()).unwrap();
    let out = synth(tmp.path(), "d", "0", &["--shift", s(&spec)]);
    assert!(out.join("dim/manifest.json").is_file());

    let bad = mednca(&["synth", "--out", s(&tmp.path().join("e")), "--shift", "nonsense"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nonsense"));
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/manifest.json");
    let out = mednca(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("o")), "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn info_reports_default_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "data", "0", &[]);
    let out = tmp.path().join("init");
    ok(&["train", "--data", s(&data.join("manifest.json")), "--out", s(&out), "--epochs", "0"]);
    let model = out.join("model.ncas");
    let info = ok(&["info", "--model", s(&model)]);
    assert!(info.contains("parameters: 26432"), "{info}");
    let size = std::fs::metadata(&model).unwrap().len();
    assert!(info.contains(&format!("file size: {size} bytes")), "{info}");
    // The run configuration is echoed next to the outputs.
    let echo = std::fs::read_to_string(out.join("config.json")).unwrap();
    assert!(echo.contains("\"epochs\": 0"), "{echo}");
}

#[test]
fn train_adapt_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = synth(tmp.path(), "data", "1", &["--shift", "cross_site"]);
    let manifest = data.join("manifest.json");
    let shifted = data.join("cross_site/manifest.json");

    // Zero-epoch training writes the seeded initialization.
    let init_dir = tmp.path().join("init");
    ok(&["train", "--data", s(&manifest), "--out", s(&init_dir), "--config", s(&cfg), "--epochs", "0", "--seed", "5"]);
    let init = checkpoint::load(&init_dir.join("model.ncas")).unwrap();
    let expect = mednca::trainer::initialize_parameters(init.config.clone(), 5).unwrap();
    assert_eq!(checkpoint::encode(&init), checkpoint::encode(&expect));

    let train_dir = tmp.path().join("train");
    let stdout = ok(&["train", "--data", s(&manifest), "--out", s(&train_dir), "--config", s(&cfg), "--epochs", "6"]);
    assert!(stdout.contains("checkpoint:"));
    let model_path = train_dir.join("model.ncas");
    let trained = std::fs::read(&model_path).unwrap();

    // Zero-epoch adaptation is byte-for-byte the input checkpoint.
    let a0 = tmp.path().join("adapt0");
    ok(&["adapt", "--model", s(&model_path), "--data", s(&shifted), "--out", s(&a0), "--config", s(&cfg), "--epochs", "0"]);
    assert_eq!(std::fs::read(a0.join("adapted.ncas")).unwrap(), trained);

    let a1 = tmp.path().join("adapt1");
    let stdout = ok(&[
        "adapt", "--model", s(&model_path), "--data", s(&shifted), "--out", s(&a1), "--config", s(&cfg), "--epochs", "2", "--limit", "2",
    ]);
    assert!(stdout.contains("dice on adaptation images"), "{stdout}");
    assert_ne!(std::fs::read(a1.join("adapted.ncas")).unwrap(), trained);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a1.join("adapt_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_images"], 2);
    assert_eq!(report["loss"].as_array().unwrap().len(), 2);

    // Exported maps are the phase-1 ensemble of the input model.
    let model = checkpoint::decode(&trained).unwrap();
    let images = load_split(&load_manifest(&shifted).unwrap(), Split::Train).unwrap();
    let adapt_cfg = mednca::config::RunConfig::load(&cfg).unwrap().adapt;
    let phase1 = mednca::adapter::adapt(&model, &images[..2], &mednca::adapter::AdaptConfig { epochs: 0, ..adapt_cfg }, &Default::default()).unwrap();
    for (img, st) in images.iter().zip(&phase1.stats) {
        let mean = pgm::read(&a1.join(format!("maps/{}_mean.pgm", img.id))).unwrap();
        assert_eq!(mean, pgm::GrayImage::from_tensor(&st.mean));
        assert!(a1.join(format!("maps/{}_std.pgm", img.id)).is_file());
    }

    let ev = tmp.path().join("eval");
    let stdout = ok(&["eval", "--model", s(&model_path), "--data", s(&shifted), "--out", s(&ev), "--mode", "ensemble", "--runs", "3"]);
    assert!(stdout.starts_with("dice: "), "{stdout}");
    let table = std::fs::read_to_string(ev.join("eval_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");

    let pr = tmp.path().join("pred");
    let img = data.join("images/test-000.pgm");
    let stdout = ok(&["predict", "--model", s(&model_path), "--image", s(&img), "--out", s(&pr)]);
    assert!(stdout.starts_with("foreground fraction: "));
    for suffix in ["logits", "mask", "overlay"] {
        let p = pgm::read(&pr.join(format!("test-000_{suffix}.pgm"))).unwrap();
        assert_eq!((p.width, p.height), (16, 16));
    }
}
