use std::path::Path;
use std::process::{Command, Output};

fn brushnet(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_brushnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = brushnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn tiny_train_inpaint_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), "lr = 0.001\nbatch_size = 2\nwarmup = 0\nlog_every = 0\n").unwrap();

    ok(dir, &["--seed", "3", "synth-data", "--out", "data", "--count", "4"]);
    assert!(dir.join("data/manifest.jsonl").exists());
    ok(dir, &["--config", "run.toml", "train-codec", "--data", "data/manifest.jsonl", "--steps", "2"]);
    ok(dir, &["--config", "run.toml", "train-base", "--data", "data/manifest.jsonl", "--steps", "2"]);
    ok(dir, &["--config", "run.toml", "train-branch", "--data", "data/manifest.jsonl", "--steps", "2"]);
    for name in ["codec", "base", "branch"] {
        assert!(dir.join(format!("checkpoints/{name}.ckpt")).exists());
    }

    let image = "data/images/00000.png";
    let mask = "data/masks/00000-inside.png";
    let args = |out: &'static str, pipeline: &'static str| {
        vec!["inpaint", "--image", image, "--mask", mask, "--out", out, "--sample-steps", "2", "--pipeline", pipeline]
    };
    ok(dir, &args("a.png", "brushnet"));
    ok(dir, &args("b.png", "brushnet"));
    ok(dir, &args("c.png", "bld"));
    let a = std::fs::read(dir.join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("b.png")).unwrap(), "same seed, same output");

    let stdout = ok(dir, &["eval", "--bench", "data/manifest.jsonl", "--out", "results", "--sample-steps", "2", "--limit", "2"]);
    assert!(stdout.contains("brushnet") && stdout.contains("bld"));
    let csv = std::fs::read_to_string(dir.join("results/benchmark.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(dir.join("results/benchmark.json").exists());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "learning_rate = 1\n").unwrap();
    let out = brushnet(dir, &["--config", "bad.toml", "synth-data", "--out", "d", "--count", "1"]);
    assert!(!out.status.success());

    let out = brushnet(dir, &["train-base", "--data", "missing.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}
