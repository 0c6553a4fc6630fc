use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
schema_version = 1
seed = 3
out_dir = "out"

[gen_data]
train_length = 1200
test_length = 400
msap_length = 200

[train.fixed]
hidden = 20
lambda = 1e-3
order = 1

[eval]
horizon = 100

[simulate]
cycles = 40
"#;

fn elm_mpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elm-mpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn pipeline(config: &str, out_dir: &Path) {
    let out = out_dir.to_str().unwrap();
    for cmd in ["gen-data", "train", "eval", "simulate"] {
        let r = elm_mpc(&[cmd, "--config", config, "--out-dir", out]);
        assert_eq!(code(&r), 0, "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "schema_version = 1\nsed = 4\n");
    let r = elm_mpc(&["gen-data", "--config", &cfg]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error:"));
}

#[test]
fn wrong_schema_version_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "schema_version = 7\n");
    assert_eq!(code(&elm_mpc(&["train", "--config", &cfg])), 2);
}

#[test]
fn empty_grid_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let text = "schema_version = 1\n[train.grid]\nhidden = []\nlambda = [1e-3]\norder = [1]\n";
    let cfg = write_config(dir.path(), "c.toml", text);
    assert_eq!(code(&elm_mpc(&["train", "--config", &cfg])), 2);
}

#[test]
fn missing_config_file_is_reported() {
    let r = elm_mpc(&["eval", "--config", "/nonexistent/run.toml"]);
    assert_ne!(code(&r), 0);
}

#[test]
fn missing_training_data_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    assert_eq!(code(&elm_mpc(&["train", "--config", &cfg])), 3);
}

#[test]
fn pipeline_is_reproducible_and_overrides_apply() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&cfg, &a);
    pipeline(&cfg, &b);
    assert!(!dir.path().join("out").exists(), "--out-dir ignored");

    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for required in ["model.txt", "metrics.txt", "trace_step.csv", "summary_step.txt", "train_response.csv"] {
        assert!(names.iter().any(|n| n == required), "missing {required}");
    }
    for name in &names {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name:?} differs between runs");
    }

    let trace = fs::read_to_string(a.join("trace_step.csv")).unwrap();
    for key in ["version", "command", "config_sha256", "seed"] {
        assert!(trace.lines().take_while(|l| l.starts_with('#')).any(|l| l.contains(key)), "header lacks {key}");
    }

    let c = dir.path().join("c");
    let r = elm_mpc(&["gen-data", "--config", &cfg, "--out-dir", c.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(code(&r), 0);
    let reseeded = fs::read(c.join("train_excitation.csv")).unwrap();
    assert_ne!(reseeded, fs::read(a.join("train_excitation.csv")).unwrap());
    assert!(String::from_utf8_lossy(&reseeded).contains("# seed = 99"));
}

#[test]
fn eval_horizon_longer_than_data_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    for cmd in ["gen-data", "train"] {
        assert_eq!(code(&elm_mpc(&[cmd, "--config", &cfg, "--out-dir", o])), 0);
    }
    let long = SMALL.replace("horizon = 100", "horizon = 5000");
    let cfg2 = write_config(dir.path(), "long.toml", &long);
    assert_eq!(code(&elm_mpc(&["eval", "--config", &cfg2, "--out-dir", o])), 3);
}
