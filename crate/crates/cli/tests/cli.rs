//! End-to-end tests of the `gan-forensics` binary: every subcommand runs
//! against a temporary directory, outputs land where documented, reruns are
//! bitwise-deterministic, and failures produce JSON errors with nonzero
//! exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gan-forensics"))
}

fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is a JSON summary")
}

fn run_err(args: &[&str]) -> (Output, serde_json::Value) {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    let err: serde_json::Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)));
    assert!(err.get("error").is_some(), "error JSON lacks `error` field: {err}");
    (out, err)
}

/// Small-but-valid settings so training commands finish in seconds.
fn tiny_config(dir: &Path, steps: u64) -> PathBuf {
    let path = dir.join("config.json");
    let config = serde_json::json!({
        "output_dir": dir.join("run"),
        "seed": 5,
        "dataset": {
            "image_size": 16,
            "n_train": 4,
            "n_test": 2,
            "seed": 5,
            "domain_a": {
                "background": [0.16, 0.42, 0.20],
                "blob": [0.85, 0.10, 0.10],
                "radius_range": [0.30, 0.42],
                "texture_amp": 0.05,
                "noise_amp": 0.02
            },
            "domain_b": {
                "background": [0.20, 0.24, 0.42],
                "blob": [0.95, 0.60, 0.05],
                "radius_range": [0.16, 0.26],
                "texture_amp": 0.05,
                "noise_amp": 0.02
            }
        },
        "generator": {
            "image_size": 16,
            "base_channels": 4,
            "n_downsamples": 2,
            "n_residual_blocks": 1,
            "artifact_free": false
        },
        "training": {
            "learning_rate": 2e-4,
            "adam_betas": [0.5, 0.999],
            "cycle_weight": 10.0,
            "batch_size": 1,
            "total_steps": steps,
            "rng_seed": 5
        }
    });
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("missing {}: {e}", path.display()))
}

#[test]
fn synth_writes_layout_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), 1);
    let summary = run_ok(&["synth", "--config", config.to_str().unwrap()]);
    assert_eq!(summary["n_train"], 4);

    let root = tmp.path().join("run");
    for split in ["trainA", "trainB", "testA", "testB"] {
        let dir = root.join("dataset").join(split);
        let n = std::fs::read_dir(&dir).unwrap().count();
        let expected = if split.starts_with("train") { 4 } else { 2 };
        assert_eq!(n, expected, "{split} file count");
    }
    assert!(root.join("config.resolved.json").exists());
    let first = read(&root.join("dataset/trainA/img_0000.png"));

    // a second run regenerates bitwise-identical files
    let tmp2 = tempfile::tempdir().unwrap();
    let config2 = tiny_config(tmp2.path(), 1);
    run_ok(&["synth", "--config", config2.to_str().unwrap()]);
    let second = read(&tmp2.path().join("run/dataset/trainA/img_0000.png"));
    assert_eq!(first, second);
}

#[test]
fn unknown_config_keys_are_rejected_with_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"output_dir": "x", "typo_field": 1}"#).unwrap();
    let (out, err) = run_err(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(err["error"].as_str().unwrap().contains("typo_field"), "{err}");
}

#[test]
fn flag_overrides_win_over_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), 1);
    let override_dir = tmp.path().join("elsewhere");
    run_ok(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        override_dir.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    let resolved: serde_json::Value =
        serde_json::from_slice(&read(&override_dir.join("config.resolved.json"))).unwrap();
    assert_eq!(resolved["seed"], 99);
    assert_eq!(resolved["dataset"]["seed"], 99, "master seed propagates");
    assert_eq!(resolved["training"]["rng_seed"], 99);
    assert!(override_dir.join("dataset/trainA/img_0000.png").exists());
}

#[test]
fn train_generate_and_resume_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path(), 5);
    let run_dir = tmp.path().join("run");

    let summary = run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--variant",
        "conventional",
    ]);
    assert_eq!(summary["steps"], 5);
    let ckpt = run_dir.join("conventional/checkpoint.json");
    let losses_5 = String::from_utf8(read(&run_dir.join("conventional/losses.csv"))).unwrap();
    assert!(losses_5.starts_with("step,adv_d,adv_g,cyc\n"));
    assert_eq!(losses_5.lines().count(), 6, "header + 5 rows");

    // resume from step 3 must reproduce the 5-step run's CSV bitwise
    let tmp_b = tempfile::tempdir().unwrap();
    let config_3 = tiny_config(tmp_b.path(), 3);
    run_ok(&["train", "--config", config_3.to_str().unwrap(), "--variant", "conventional"]);
    let config_5 = tiny_config(tmp_b.path(), 5);
    run_ok(&[
        "train",
        "--config",
        config_5.to_str().unwrap(),
        "--variant",
        "conventional",
        "--resume",
        tmp_b.path().join("run/conventional/checkpoint.json").to_str().unwrap(),
    ]);
    let resumed = String::from_utf8(read(&tmp_b.path().join("run/conventional/losses.csv"))).unwrap();
    assert_eq!(losses_5, resumed);

    // wrong-variant resume fails loudly
    let (_, err) = run_err(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--variant",
        "artifact-free",
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert!(err["error"].as_str().unwrap().contains("variant"), "{err}");

    // generation: one output per input, valid PNGs, deterministic
    run_ok(&["synth", "--config", config.to_str().unwrap()]);
    let test_a = run_dir.join("dataset/testA");
    let fakes = tmp.path().join("fakes");
    let summary = run_ok(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        test_a.to_str().unwrap(),
        "--out",
        fakes.to_str().unwrap(),
    ]);
    assert_eq!(summary["n_images"], 2);
    let fake_names: Vec<_> = std::fs::read_dir(&fakes)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(fake_names.len(), 2);
    let first = read(&fakes.join("img_0000.png"));
    let fakes2 = tmp.path().join("fakes2");
    run_ok(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        test_a.to_str().unwrap(),
        "--out",
        fakes2.to_str().unwrap(),
    ]);
    assert_eq!(first, read(&fakes2.join("img_0000.png")));
}

/// Writes a PNG checkerboard and a constant image with the library encoder.
fn write_probe_images(dir: &Path) -> (PathBuf, PathBuf) {
    use gan_forensics::data::{save_image, ImageBuffer};
    let n = 16;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
            data.extend_from_slice(&[v, v, v]);
        }
    }
    let checker = ImageBuffer::new(n, n, data).unwrap();
    let constant = ImageBuffer::filled(n, n, [0.5, 0.5, 0.5]).unwrap();
    let checker_path = dir.join("checker.png");
    let constant_path = dir.join("constant.png");
    save_image(&checker, &checker_path).unwrap();
    save_image(&constant, &constant_path).unwrap();
    (checker_path, constant_path)
}

#[test]
fn spectrum_exports_identify_checkerboard_and_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    std::fs::create_dir_all(&imgs).unwrap();
    write_probe_images(&imgs);
    let out = tmp.path().join("spec");
    let summary = run_ok(&["spectrum", "--input", imgs.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(summary["n_images"], 2);

    let checker: serde_json::Value =
        serde_json::from_slice(&read(&out.join("checker.artifact.json"))).unwrap();
    let ratio = checker["nyquist_energy_ratio"].as_f64().unwrap();
    assert!((ratio - 1.0).abs() <= 1e-12, "checkerboard ratio {ratio}");
    let constant: serde_json::Value =
        serde_json::from_slice(&read(&out.join("constant.artifact.json"))).unwrap();
    assert_eq!(constant["nyquist_energy_ratio"].as_f64().unwrap(), 0.0);

    // the 1D CSV parses back to the in-memory profile exactly
    let csv = String::from_utf8(read(&out.join("checker.spectrum1d.csv"))).unwrap();
    let parsed = gan_forensics::forensics::spectrum_1d_from_csv(&csv).unwrap();
    let img = gan_forensics::data::load_image(&imgs.join("checker.png")).unwrap();
    let profile = gan_forensics::forensics::log_spectrum(&img).unwrap();
    assert_eq!(parsed, profile.spectrum_1d);
    assert!(out.join("checker.spectrum.pgm").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn detect_train_eval_and_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    // two trivially separable sets: constants (reals) vs checkerboards (fakes)
    let reals = tmp.path().join("reals");
    let fakes = tmp.path().join("fakes");
    std::fs::create_dir_all(&reals).unwrap();
    std::fs::create_dir_all(&fakes).unwrap();
    use gan_forensics::data::{save_image, ImageBuffer};
    let n = 16;
    for i in 0..6 {
        let v = 0.3 + 0.05 * i as f64;
        let real = ImageBuffer::filled(n, n, [v, v * 0.9, v * 1.1]).unwrap();
        save_image(&real, &reals.join(format!("r{i}.png"))).unwrap();
        let mut data = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let c = if (x + y) % 2 == 0 { v } else { 0.0 };
                data.extend_from_slice(&[c, c, c]);
            }
        }
        let fake = ImageBuffer::new(n, n, data).unwrap();
        save_image(&fake, &fakes.join(format!("f{i}.png"))).unwrap();
    }

    let model = tmp.path().join("detector.json");
    let summary = run_ok(&[
        "detect", "train",
        "--real", reals.to_str().unwrap(),
        "--fake", fakes.to_str().unwrap(),
        "--model-out", model.to_str().unwrap(),
    ]);
    assert_eq!(summary["training_accuracy"].as_f64().unwrap(), 1.0);

    let report = tmp.path().join("run/detect/conventional.report.json");
    let summary = run_ok(&[
        "detect", "eval",
        "--real", reals.to_str().unwrap(),
        "--fake", fakes.to_str().unwrap(),
        "--model", model.to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(summary["acc"].as_f64().unwrap(), 1.0);
    assert_eq!(summary["acc_fake"].as_f64().unwrap(), 1.0);
    let parsed: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(parsed["n_tn"], 6);
    assert_eq!(parsed["n_qf"], 6);

    // empty fake directory is an explicit error
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let (_, err) = run_err(&[
        "detect", "eval",
        "--real", reals.to_str().unwrap(),
        "--fake", empty.to_str().unwrap(),
        "--model", model.to_str().unwrap(),
    ]);
    assert!(err["error"].as_str().unwrap().contains("no PNG/PPM images"), "{err}");

    // assemble the rest of a run directory, then consolidate it
    let run_dir = tmp.path().join("run");
    for variant in ["conventional", "artifact_free"] {
        let vdir = run_dir.join(variant);
        std::fs::create_dir_all(&vdir).unwrap();
        std::fs::write(
            vdir.join("losses.csv"),
            "step,adv_d,adv_g,cyc\n1,2.0,0.0,0.9\n2,1.9,0.01,0.8\n",
        )
        .unwrap();
        run_ok(&[
            "spectrum",
            "--input", (if variant == "conventional" { &fakes } else { &reals }).to_str().unwrap(),
            "--out", run_dir.join("spectrum").join(variant).to_str().unwrap(),
        ]);
    }
    std::fs::copy(&report, run_dir.join("detect/artifact_free.report.json")).unwrap();

    let summary = run_ok(&["report", "--run", run_dir.to_str().unwrap()]);
    let csv = String::from_utf8(read(&run_dir.join("report.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "variant,steps,final_cyc,mean_nyquist_energy_ratio,acc,acc_fake,n_tn,n_fp,n_tp,n_fn"
    );
    assert!(lines.next().unwrap().starts_with("conventional,2,0.8,"));
    assert!(lines.next().unwrap().starts_with("artifact_free,2,0.8,"));
    let md = String::from_utf8(read(&run_dir.join("report.md"))).unwrap();
    assert!(md.contains("| conventional |") && md.contains("| artifact_free |"));
    assert!(summary["csv"].as_str().unwrap().ends_with("report.csv"));

    // missing inputs fail loudly
    let bare = tmp.path().join("bare");
    std::fs::create_dir_all(&bare).unwrap();
    let (_, err) = run_err(&["report", "--run", bare.to_str().unwrap()]);
    assert!(err["error"].as_str().unwrap().contains("losses.csv"), "{err}");
}

#[test]
fn argument_errors_emit_json_on_stderr() {
    let (out, err) = run_err(&["train", "--variant", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(err["error"].as_str().unwrap().contains("bogus"), "{err}");
}
