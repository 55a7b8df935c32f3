use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn advlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advlab")).args(args).output().unwrap()
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Small MLP on an MNIST subset; quick enough for every CLI round trip.
fn toy_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"seed = 4
output = "{out}"

[data]
source = "mnist"
dir = "{data}"
train_limit = 300
test_limit = 40

[model]
kind = "mlp"
hidden = [24]

[train]
learning_rate = 0.02
batch_size = 32
max_epochs = 3

[[attacks]]
kind = "G"

[[attacks]]
kind = "P"
budget = 40

[probe]
trials = 5

[study]
pool = 12
"#,
        out = dir.join("out").display(),
        data = data_dir().display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let out = advlab(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(advlab(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[probe]\nthreshold = 2.0\n").unwrap();
    let out = advlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_checkpoint_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = advlab(&["probe", "-c", cfg.to_str().unwrap(), "-m", "/nonexistent/ckpt.json", "--index", "0"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_then_attack_probe_and_detect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&advlab(&["train", "-c", cfg]));
    let ckpt = dir.path().join("out/ckpt.json");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("out/ckpt-train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let model = ckpt.to_str().unwrap();
    ok(&advlab(&["attack", "-c", cfg, "-m", model, "--index", "1", "--kind", "P"]));
    let adv = dir.path().join("out/adversarial.json");
    let v: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&adv).unwrap()).unwrap();
    assert_eq!(v.len(), 784);

    ok(&advlab(&["probe", "-c", cfg, "-m", model, "--input", adv.to_str().unwrap()]));
    let out = advlab(&["detect", "-c", cfg, "-m", model, "--index", "1"]);
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(["genuine", "suspicious"].contains(&report["verdict"].as_str().unwrap()));
    assert_eq!(report["input"], "test:1");
}

#[test]
fn runs_are_byte_reproducible() {
    let read = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        ok(&advlab(&["train", "-c", cfg.to_str().unwrap(), "--seed", seed, "--epochs", "1"]));
        let out = dir.path().join("out");
        (
            std::fs::read(out.join("ckpt.json")).unwrap(),
            std::fs::read(out.join("ckpt-train.jsonl")).unwrap(),
        )
    };
    let a = read("9");
    assert_eq!(a, read("9"));
    assert_ne!(a.0, read("10").0);
}

#[test]
fn ratio_bench_writes_monotone_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&advlab(&["train", "-c", cfg]));
    let model = dir.path().join("out/ckpt.json");
    ok(&advlab(&["bench", "ratios", "-c", cfg, "-m", model.to_str().unwrap()]));
    for name in ["ratios-G-nearest.csv", "ratios-P-return.csv"] {
        let text = std::fs::read_to_string(dir.path().join("out").join(name)).unwrap();
        let rows: Vec<(f64, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let (v, c) = l.split_once(',').unwrap();
                (v.parse().unwrap(), c.parse().unwrap())
            })
            .collect();
        for pair in rows.windows(2) {
            assert!(pair[0].0 <= pair[1].0 && pair[0].1 < pair[1].1, "{name}");
        }
        if let Some(last) = rows.last() {
            assert!((last.1 - 1.0).abs() < 1e-12);
        }
    }
    assert!(dir.path().join("out/ratios.txt").exists());
}
