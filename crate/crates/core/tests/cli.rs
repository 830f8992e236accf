mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deobstruct::evaluation::{psnr, MetricReport};
use deobstruct::imaging::load_pair;
use deobstruct::model::ModelBundle;
use deobstruct::training::{Checkpoint, TrainConfig, TrainFile};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deobstruct"))
        .args(args)
        .env_remove("DEOBSTRUCT_CKPT_DIR")
        .output()
        .expect("binary runs")
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["synth", "--kind", "fence", "--count", "4", "--seed", "7", "--size", "32", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 4 * 5);
    assert_eq!(ta, tb);
}

#[test]
fn missing_image_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let ckpt = dir.path().join("model.ckpt");
    let model = ModelBundle::new(common::small_model_config(), 0).unwrap();
    Checkpoint::from_model(model).save(&ckpt).unwrap();
    let o = run(&["remove", "--image", missing.to_str().unwrap(), "--instruction", "remove the fence", "--ckpt", ckpt.to_str().unwrap(), "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert!(line["message"].as_str().unwrap().contains(missing.to_str().unwrap()), "{err}");
    assert_eq!(run(&["remove", "--bogus"]).status.code(), Some(2));
}

#[test]
fn identity_eval_reports_input_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["synth", "--kind", "raindrop", "--count", "2", "--seed", "1", "--size", "32", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let report_path = dir.path().join("report.json");
    let o = run(&["eval", "--identity", "--data", data.to_str().unwrap(), "--report-path", report_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = MetricReport::from_json(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.images.len(), 2);
    for m in &report.images {
        let pair = load_pair(&data.join(&m.name)).unwrap();
        assert_eq!(m.psnr, psnr(pair.background(), pair.composite()).unwrap());
    }
}

#[test]
fn train_then_remove_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["synth", "--kind", "fence", "--count", "2", "--seed", "3", "--size", "32", "--out", data.to_str().unwrap()]).status.success());
    let cfg = TrainFile {
        train: TrainConfig {
            total_steps: 4,
            detector_warmup_steps: 2,
            patch_schedule: vec![(0, 16), (3, 32)],
            ..TrainConfig::default()
        },
        model: common::small_model_config(),
    };
    let cfg_path = dir.path().join("train.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--config", cfg_path.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run_dir.join("final.ckpt").exists());
    assert_eq!(fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap().lines().count(), 4);

    let image = data.join("fence_0000").join("composite.png");
    let out = dir.path().join("out.png");
    let o = Command::new(env!("CARGO_BIN_EXE_deobstruct"))
        .args(["remove", "--image", image.to_str().unwrap(), "--instruction", "remove the fence", "--out", out.to_str().unwrap()])
        .env("DEOBSTRUCT_CKPT_DIR", &run_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out.trace.json")).unwrap()).unwrap();
    assert_eq!(trace["adapter_ran"].as_bool().unwrap(), trace["class"] == "semi_transparent");
    assert_eq!(trace["instruction"], "remove the fence");
    let first = fs::read(&out).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_deobstruct"))
        .args(["remove", "--image", image.to_str().unwrap(), "--instruction", "remove the fence", "--out", out.to_str().unwrap()])
        .env("DEOBSTRUCT_CKPT_DIR", &run_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(&out).unwrap(), first);
}
