use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use vidseg_core::checkpoint;
use vidseg_core::data::DatasetRecipe;
use vidseg_core::model::ModelConfig;
use vidseg_core::train::TrainConfig;

fn vidseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string(value).unwrap()).unwrap();
}

fn tiny_recipe(num_clips: usize) -> DatasetRecipe {
    DatasetRecipe {
        num_clips,
        num_frames: 4,
        height: 32,
        width: 32,
        min_size: 5.0,
        max_size: 8.0,
        ..DatasetRecipe::default()
    }
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            channels: [4, 8, 12, 16],
            c_mem: 8,
            d: 16,
            heads: 2,
            memory_blocks: 1,
            decoder_blocks: 1,
            memory_tokens: 2,
            ..ModelConfig::desk()
        },
        epochs: 1,
        steps_per_epoch: steps,
        seq_len: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 4] = [
        ("gen-data", &["--config", "--seed", "--out"]),
        ("train", &["--config", "--data", "--out"]),
        ("eval", &["--mode", "--checkpoint", "--data", "--clicks"]),
        ("serve", &["--checkpoint", "--port"]),
    ];
    for (sub, flags) in cases {
        let out = vidseg(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help lacks {flag}:\n{text}");
        }
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = vidseg(&["gen-data", "--out", "x", "--frobnicate"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&vidseg(&["launch"])), 2);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("recipe.json");
    write_json(&config, &tiny_recipe(3));
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let run = vidseg(&["gen-data", "--config", config.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert!(ta.contains_key("manifest.json"));
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    write_json(&dir.path().join("recipe.json"), &tiny_recipe(5));
    write_json(&dir.path().join("train.json"), &tiny_train(10));
    assert_eq!(code(&vidseg(&["gen-data", "--config", &p("recipe.json"), "--seed", "1", "--out", &p("data")])), 0);

    let run = vidseg(&["train", "--config", &p("train.json"), "--data", &p("data"), "--out", &p("run")]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let ckpt = dir.path().join("run").join("final.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    let model = checkpoint::load(&ckpt).unwrap();
    assert_eq!(checkpoint::to_bytes(&model).unwrap(), bytes);
    let metrics = std::fs::read_to_string(dir.path().join("run").join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 10);

    let out = vidseg(&["eval", "--mode", "online", "--clicks", "3", "--checkpoint", &p("run/final.ckpt"), "--data", &p("data"), "--out", &p("report.json")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["n_click"], 3);
    assert_eq!(report["protocol"], "online");

    let out = vidseg(&["eval", "--mode", "semivos", "--prompt", "box", "--checkpoint", &p("run/final.ckpt"), "--data", &p("data")]);
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["protocol"]["semivos"], "box");

    let zero = vidseg(&["eval", "--mode", "offline", "--clicks", "0", "--checkpoint", &p("run/final.ckpt"), "--data", &p("data")]);
    assert_eq!(code(&zero), 2);
    let missing = vidseg(&["eval", "--mode", "online", "--checkpoint", &p("nope.ckpt"), "--data", &p("data")]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn invalid_train_config_exits_with_validation_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"batch_size": 0}"#).unwrap();
    let out = vidseg(&["train", "--config", cfg.to_str().unwrap(), "--data", "/nonexistent", "--out", "/tmp/unused"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(&cfg, "{not json").unwrap();
    let out = vidseg(&["train", "--config", cfg.to_str().unwrap(), "--data", "/nonexistent", "--out", "/tmp/unused"]);
    assert_eq!(code(&out), 2);
}
