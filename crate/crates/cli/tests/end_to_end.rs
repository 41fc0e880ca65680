use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mutualseg"))
}

fn run(args: &[&str]) -> std::process::Output {
    let out = bin().args(args).env("RUST_LOG", "warn").output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

const SMALL: [&str; 10] = [
    "--set", "image_size=16", "--set", "n_target=3", "--set", "n_assistant=3", "--set", "n_test=2", "--set", "gen_res_blocks=1",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn synth_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let train = dir.path().join("train");
    let eval = dir.path().join("eval");
    let d = data.to_str().unwrap();
    let t = train.to_str().unwrap();
    let e = eval.to_str().unwrap();

    let out = run(&with(&["synth", "--data-root", d, "--out-dir", e], &SMALL));
    assert!(out.status.success());
    assert!(data.join("train/target/manifest.txt").exists());
    assert!(data.join("train/assistant/manifest.txt").exists());
    assert!(data.join("test/target/manifest.txt").exists());

    let out = run(&with(&["train", "--data-root", d, "--out-dir", t, "--epochs", "1"], &SMALL));
    assert!(out.status.success());
    for f in ["final.ckpt", "metrics.log", "manifest.txt", "checkpoints/latest.ckpt"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(train.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# version: mutualseg"));
    assert!(manifest.contains("lambda_cyc=10"));
    assert_eq!(std::fs::read_to_string(train.join("metrics.log")).unwrap().lines().count(), 3);

    let ckpt = train.join("final.ckpt");
    let out = run(&with(&["eval", "--data-root", d, "--out-dir", e, "--checkpoint", ckpt.to_str().unwrap()], &SMALL));
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ensemble"), "{stdout}");
    assert!(eval.join("eval.csv").exists());

    for dir in [t, e] {
        let out = run(&["report", "--out-dir", dir]);
        assert!(out.status.success());
    }
    assert!(train.join("loss_curves.svg").exists());
    assert!(eval.join("eval_dice.svg").exists());
    assert!(eval.join("report.txt").exists());
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let t = dir.path().join("t");
    assert!(run(&with(&["synth", "--data-root", d.to_str().unwrap(), "--out-dir", t.to_str().unwrap()], &SMALL))
        .status
        .success());
    let out = run(&with(
        &["train", "--data-root", d.to_str().unwrap(), "--out-dir", t.to_str().unwrap(), "--epochs", "0"],
        &SMALL,
    ));
    assert!(out.status.success());
    assert!(t.join("final.ckpt").exists());
}

#[test]
fn eval_without_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--data-root", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn unknown_key_exits_with_usage_error() {
    let out = run(&["synth", "--data-root", "x", "--set", "bogus_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn manifest_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ds = d.to_str().unwrap();
    assert!(run(&with(&["synth", "--data-root", ds, "--out-dir", a.to_str().unwrap()], &SMALL)).status.success());
    let args = with(
        &["train", "--data-root", ds, "--out-dir", a.to_str().unwrap(), "--epochs", "1", "--precision", "f64"],
        &SMALL,
    );
    assert!(run(&args).status.success());
    let manifest = a.join("manifest.txt");
    let out = run(&[
        "train",
        "--config",
        manifest.to_str().unwrap(),
        "--out-dir",
        b.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.join("metrics.log")), read(&b.join("metrics.log")));
    assert_eq!(read(&a.join("final.ckpt")), read(&b.join("final.ckpt")));
}
