use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn emomod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emomod"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A corpus and model small enough to train in a second.
fn write_tiny_config(dir: &Path) {
    let cfg = json!({
        "seed": 1,
        "forge": {"anchors": 2, "frames": 8, "identities": 4, "held_out_identities": 1,
                  "held_out_anchors": 1, "vertices": 96, "expr_dims": 6},
        "emotion": {"token_dim": 8},
        "geo": {"d_model": 8, "ff_hidden": 16},
        "app": {"d_model": 8, "ff_hidden": 8},
        "train": {"steps": 6, "app_steps": 2, "accumulate": 2, "steps_per_epoch": 3, "eval_frames": 2},
        "render": {"resolution": 16}
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn full_pipeline_runs_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tiny_config(d);
    let c = ["--config", "run.json"];

    let out = emomod(d, &[&["forge"][..], &c].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("sync check: PASS"));
    let again = emomod(d, &[&["forge"][..], &c].concat());
    assert!(stdout(&again).contains("identical to existing dataset"), "{}", stdout(&again));

    let out = emomod(d, &[&["train-geo"][..], &c, &["--out", "geo"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("geo/ckpt.json").exists() && d.join("geo/loss_curve.csv").exists());

    let out = emomod(d, &[&["train-app"][..], &c, &["--geo", "geo"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = emomod(d, &[&["eval"][..], &c, &["--report", "eval.json"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    for key in ["psnr", "ssim", "aed", "apd", "vertex_rmse"] {
        assert!(report["splits"]["held_out"][key].is_number(), "{key}");
    }

    let target = ["--identity", "3", "--anchor", "1"];
    let out = emomod(d, &[&["transfer"][..], &c, &target, &["--src", "happy", "--tgt", "sad"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("out/frame_007.ppm").exists() && d.join("out/params.csv").exists());

    let interp = [&["interpolate"][..], &c, &target, &["--from", "happy", "--via", "neutral", "--to", "sad", "--out", "sweep"]].concat();
    let out = emomod(d, &interp);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("sweep/step_010.ppm").exists());

    let out = emomod(d, &[&["render"][..], &c, &target, &["--emotion", "fear", "--out", "f.ppm"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read(d.join("f.ppm")).unwrap().starts_with(b"P6"));
}

#[test]
fn configuration_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&emomod(d, &["forge", "--config", "absent.json"])), 3);

    fs::write(d.join("noseed.json"), "{}").unwrap();
    assert_eq!(code(&emomod(d, &["forge", "--config", "noseed.json"])), 5);

    fs::write(d.join("typo.json"), r#"{"seed": 1, "trian": {}}"#).unwrap();
    assert_eq!(code(&emomod(d, &["forge", "--config", "typo.json"])), 5);

    write_tiny_config(d);
    assert_eq!(code(&emomod(d, &["forge", "--config", "run.json", "--set", "train.steps"])), 5);
    assert_eq!(code(&emomod(d, &["forge", "--config", "run.json", "--set", "emotion.dims=7"])), 5);
    assert_eq!(code(&emomod(d, &["frobnicate"])), 5);
    let bad_label = ["transfer", "--config", "run.json", "--identity", "0", "--anchor", "0", "--src", "joy", "--tgt", "sad"];
    let out = emomod(d, &bad_label);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprised"), "valid labels are listed");
}

#[test]
fn artifact_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tiny_config(d);
    let c = ["--config", "run.json"];
    assert_eq!(code(&emomod(d, &[&["train-geo"][..], &c].concat())), 3, "missing dataset");

    assert_eq!(code(&emomod(d, &[&["forge"][..], &c].concat())), 0);
    let other = [&["train-geo"][..], &c, &["--set", "forge.expr_dims=8"]].concat();
    assert_eq!(code(&emomod(d, &other)), 4, "dataset disagrees with config");

    assert_eq!(code(&emomod(d, &[&["train-geo"][..], &c].concat())), 0);
    let wider = [&["eval"][..], &c, &["--set", "emotion.token_dim=16"]].concat();
    assert_eq!(code(&emomod(d, &wider)), 4, "checkpoint disagrees with config");

    let blob = d.join("ckpt/ckpt.f32");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&emomod(d, &[&["eval"][..], &c].concat())), 2, "truncated checkpoint");
}

#[test]
fn gradcheck_reports_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = emomod(tmp.path(), &["gradcheck"]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("all checks PASS"));
    let bad = emomod(tmp.path(), &["gradcheck", "--inject-tanh-fault"]);
    assert_eq!(code(&bad), 10);
    let tanh_line = stdout(&bad).lines().find(|l| l.starts_with("tanh")).unwrap().to_string();
    assert!(tanh_line.contains("FAIL"), "{tanh_line}");
}
