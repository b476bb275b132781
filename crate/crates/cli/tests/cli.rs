use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use tempfile::TempDir;

fn cog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cog"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic dataset with `d_vis` features.
fn dataset(dir: &Path, d_vis: usize) -> std::path::PathBuf {
    let cfg = dir.join(format!("synth{d_vis}.json"));
    fs::write(
        &cfg,
        format!(r#"{{"num_videos": 5, "min_len": 40, "max_len": 50, "d_vis": {d_vis}, "d_text": 6, "gestures": 3}}"#),
    )
    .unwrap();
    let out = dir.join(format!("data{d_vis}"));
    let o = cog(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let prompts = data.join("prompts.cogp");
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--prompts",
        p(&prompts),
        "--out",
        p(out),
        "--n",
        "6",
        "--stages",
        "2",
    ];
    args.extend_from_slice(extra);
    cog(&args)
}

#[test]
fn help_names_the_origin_of_defaults() {
    let o = cog(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let h = text(&o.stdout);
    for needle in [
        "[default: 0.0005]",
        "[default: 50]",
        "[default: 0.15]",
        "[default: 40]",
        "[published]",
        "[local]",
    ] {
        assert!(h.contains(needle), "missing {needle} in\n{h}");
    }
    let top = text(&cog(&["--help"]).stdout);
    assert!(top.contains("Exit codes") && top.contains("COG_THREADS"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&cog(&["frobnicate"])), 2);
    assert_eq!(code(&cog(&["train", "--bogus"])), 2);
    assert_eq!(code(&cog(&["grad-check", "--seed", "x"])), 2);
}

#[test]
fn missing_and_corrupt_files_exit_3() {
    let dir = TempDir::new().unwrap();
    let o = cog(&["bench", "--ckpt", p(&dir.path().join("none.ckpt"))]);
    assert_eq!(code(&o), 3);
    assert!(text(&o.stderr).contains("none.ckpt"));
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"COG1\x05").unwrap();
    let o = cog(&["bench", "--ckpt", p(&bad)]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("truncated"));
}

#[test]
fn grad_check_passes() {
    let o = cog(&["grad-check", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stdout));
    assert!(text(&o.stdout).contains("PASS"));
}

#[test]
fn zero_epochs_writes_initialized_checkpoint_and_streams_half() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 8);
    let ckpt = dir.path().join("init.ckpt");
    let o = train(&data, &ckpt, &["--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(!text(&o.stderr).contains("epoch "));

    let out = dir.path().join("stream.csv");
    let o = cog(&[
        "stream",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&data.join("video000.coge")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("index,p_error,decision,latency_us"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() >= 40);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        assert_eq!(r[1], "0.500000000");
        assert_eq!(r[2], "1");
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn stream_reads_csv_from_stdin() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 4);
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&train(&data, &ckpt, &["--epochs", "1"])), 0);
    let mut child = Command::new(env!("CARGO_BIN_EXE_cog"))
        .args(["stream", "--ckpt", p(&ckpt), "--in", "-", "--out", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"0.1,0.2,0.3,0.4\n\n1,2,3,4,1\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert_eq!(out.lines().count(), 3);

    let mut child = Command::new(env!("CARGO_BIN_EXE_cog"))
        .args(["stream", "--ckpt", p(&ckpt), "--in", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"0.1,0.2\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 3);
    assert!(text(&o.stderr).contains("line 1"));
}

#[test]
fn identical_train_runs_give_identical_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 8);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    for out in [&a, &b] {
        let o = train(&data, out, &["--epochs", "3", "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.ckpt");
    assert_eq!(
        code(&train(&data, &c, &["--epochs", "3", "--seed", "8"])),
        0
    );
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn eval_reports_splits_and_rejects_width_mismatch() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 8);
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&train(&data, &ckpt, &["--epochs", "2"])), 0);

    let report = dir.path().join("report.csv");
    let ribbons = dir.path().join("ribbons");
    let o = Command::new(env!("CARGO_BIN_EXE_cog"))
        .args([
            "eval",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&data),
            "--report",
            p(&report),
            "--ribbons",
            p(&ribbons),
        ])
        .env("COG_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("mean±std"));
    let csv = fs::read_to_string(&report).unwrap();
    let names: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["split", "video000", "video001", "video002", "video003", "video004", "mean", "std"]
    );
    assert!(ribbons.join("video003.csv").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_cog"))
        .args([
            "eval",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&data),
            "--loso",
            "--epochs",
            "1",
            "--report",
            p(&report),
        ])
        .env("COG_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let names: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["split", "fold1", "fold2", "fold3", "fold4", "fold5", "mean", "std"]
    );

    let other = dataset(dir.path(), 5);
    let o = cog(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&other),
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&o), 2);
    assert!(
        text(&o.stderr).contains("configuration mismatch"),
        "{}",
        text(&o.stderr)
    );

    let o = Command::new(env!("CARGO_BIN_EXE_cog"))
        .args([
            "eval",
            "--ckpt",
            p(&ckpt),
            "--data",
            p(&data),
            "--report",
            p(&report),
        ])
        .env("COG_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_exits_4() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 8);
    let o = train(
        &data,
        &dir.path().join("x.ckpt"),
        &["--epochs", "3", "--lr", "1e38"],
    );
    assert_eq!(code(&o), 4, "{}", text(&o.stderr));
}

#[test]
fn bench_reports_latency() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 8);
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(code(&train(&data, &ckpt, &["--epochs", "0"])), 0);
    let o = cog(&["bench", "--ckpt", p(&ckpt), "--frames", "300"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("mean_us"));
    assert_eq!(
        code(&cog(&["bench", "--ckpt", p(&ckpt), "--frames", "10"])),
        2
    );
}
