#![allow(dead_code)]

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn cmm<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmm")).args(args).output().expect("cmm runs")
}

/// Runs cmm, requires exit 0 and returns the parsed stdout.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Value {
    let out = cmm(args);
    assert!(
        out.status.success(),
        "cmm failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

/// Exit code and parsed stderr of a failing run.
pub fn fails<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> (i32, Value) {
    let out = cmm(args);
    assert!(!out.status.success());
    let err = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr is not json: {}", String::from_utf8_lossy(&out.stderr)));
    (out.status.code().unwrap(), err)
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

pub fn small_spec() -> Value {
    serde_json::json!({"n_train": 60, "n_dev": 4, "n_test": 5, "lexicon_size": 40})
}

/// A tiny model that trains in a few seconds.
pub fn tiny_run(corpus: &Path, out: &Path, steps: u64) -> Value {
    serde_json::json!({
        "model": {"d_model": 16, "n_heads": 2, "d_ffn": 32, "n_layers_src": 1, "n_layers_mem": 1, "n_layers_dec": 1},
        "retrieval": {"m_size": 3},
        "optim": {"max_steps": steps, "warmup_steps": 10},
        "batch_max_tokens": 300,
        "paths": {"corpus": p(corpus), "out": p(out)}
    })
}

pub struct Pipeline {
    pub corpus: PathBuf,
    pub run_dir: PathBuf,
    pub ckpt: PathBuf,
    pub config: PathBuf,
}

/// gen-synth followed by train of the tiny model.
pub fn trained(root: &Path, steps: u64) -> Pipeline {
    let corpus = root.join("corpus");
    let run_dir = root.join("run");
    let spec = write_json(&root.join("spec.json"), &small_spec());
    ok(&["gen-synth", "--spec", &p(&spec), "--out", &p(&corpus)]);
    let config = write_json(&root.join("run.json"), &tiny_run(&corpus, &run_dir, steps));
    ok(&["train", "--config", &p(&config)]);
    Pipeline {
        ckpt: run_dir.join("checkpoint.bin"),
        corpus,
        run_dir,
        config,
    }
}
