use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{"num_classes":3,"image_resolution":8,"latent_shape":6,"T":4,"grad_steps":2,"feature_dim":8,"batch_size":2,"encoder_steps":60,"encoder_width":16,"generator_steps":60,"generator_hidden":16,"steps_per_epoch":5,"epochs":2}"#;

fn lbgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbgen"))
        .args(args)
        .env_remove("LBGEN_CONFIG")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_then_report_happy_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = tmp.path().join("d");
    let o = lbgen(&["synth", "--config", s(&cfg), "--out", s(&d)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("synth.run_meta.json").exists());
    let manifest = d.join("manifest.jsonl");
    let r = tmp.path().join("r");
    let o = lbgen(&["report", "--manifest", s(&manifest), "--out", s(&r)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["quality_histogram"]["counts"].is_array());
    assert!(report["TI"].is_null());
    assert_eq!(std::fs::read(r.join("report.json")).unwrap(), o.stdout);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = lbgen(&["synth", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(lbgen(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_constraint() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"T":4,"grad_steps":5}"#).unwrap();
    let o = lbgen(&["finetune", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grad_steps"), "{}", stderr(&o));
}

#[test]
fn config_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = tmp.path().join("w");
    let o = Command::new(env!("CARGO_BIN_EXE_lbgen"))
        .args(["worldgen-dump", "--count", "4", "--out", s(&d)])
        .env("LBGEN_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("worldgen-dump.run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["num_classes"], 3);
    assert_eq!(image_resolution(&d.join("0.png")), 8);
}

fn image_resolution(p: &Path) -> usize {
    lbgen::ToyImage::load_png(p).unwrap().resolution()
}

#[test]
fn rerun_refuses_or_reproduces_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let d = tmp.path().join("d");
    let args = ["synth", "--config", s(&cfg), "--out", s(&d), "--per-class", "2"];
    assert!(lbgen(&args).status.success());
    let first = std::fs::read(d.join("manifest.jsonl")).unwrap();
    let meta = std::fs::read(d.join("synth.run_meta.json")).unwrap();
    let o = lbgen(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--overwrite"));
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert!(lbgen(&again).status.success());
    assert_eq!(std::fs::read(d.join("manifest.jsonl")).unwrap(), first);
    assert_eq!(std::fs::read(d.join("synth.run_meta.json")).unwrap(), meta);
}

#[test]
fn finetune_resume_matches_uninterrupted_log() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path());
    let art = tmp.path().join("art");
    assert!(lbgen(&["pretrain-encoder", "--config", s(&cfg), "--out", s(&art)]).status.success());
    assert!(lbgen(&["pretrain-generator", "--config", s(&cfg), "--out", s(&art)]).status.success());
    let enc = art.join("encoder.bin");
    let gen = art.join("generator.bin");
    let base = ["--config", s(&cfg), "--encoder", s(&enc), "--generator", s(&gen)];

    let full = tmp.path().join("full");
    let mut a = vec!["finetune", "--out", s(&full)];
    a.extend(base);
    assert!(lbgen(&a).status.success());

    let part = tmp.path().join("part");
    let mut b = vec!["finetune", "--out", s(&part), "--stop-after", "3"];
    b.extend(base);
    assert!(lbgen(&b).status.success());
    let ckpt = part.join("trainer_state.bin");
    let ckpt_copy = tmp.path().join("ckpt.bin");
    std::fs::copy(&ckpt, &ckpt_copy).unwrap();
    let mut c = vec!["finetune", "--out", s(&part), "--resume", s(&ckpt_copy), "--overwrite"];
    c.extend(base);
    let o = lbgen(&c);
    assert!(o.status.success(), "{}", stderr(&o));

    for f in ["train_log.jsonl", "adapter.bin", "trainer_state.bin"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_bias_from_predictions_and_empty_report() {
    let tmp = TempDir::new().unwrap();
    let preds = tmp.path().join("p.jsonl");
    std::fs::write(
        &preds,
        concat!(
            r#"{"item_id":"a","predicted_class":1,"shape_class":0,"texture_class":1}"#,
            "\n",
            r#"{"item_id":"b","predicted_class":0,"shape_class":0,"texture_class":1}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = tmp.path().join("m");
    let o = lbgen(&["eval-bias", "--predictions", s(&preds), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bias_metrics.json")).unwrap()).unwrap();
    assert_eq!(m["TI"], 50.0);
    assert!(m["CB_avg"].is_null());
    assert_eq!(m["ti_excludes_neither"], true);

    let o = lbgen(&["report", "--out", s(&tmp.path().join("r"))]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["TI"].is_null() && r["CB_avg"].is_null() && r["BG_Gap"].is_null());
    assert!(!r["warnings"].as_array().unwrap().is_empty());

    let o = lbgen(&["report", "--log", "/nonexistent/log.jsonl", "--out", s(&tmp.path().join("r2"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/log.jsonl"));
}
