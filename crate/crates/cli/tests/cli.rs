//! Subcommand behaviour through the built binary: exit codes, determinism,
//! config overrides and the output formats.

use std::path::Path;
use std::process::{Command, Output};

fn skipgru(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skipgru"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Small corpus with a labelled holdout, written into `dir`.
fn gen(dir: &Path, seed: &str) -> Output {
    skipgru(&[
        "gen-data",
        "--out-dir",
        &s(dir),
        "--sessions",
        "60",
        "--tracks",
        "50",
        "--holdout",
        "12",
        "--acoustic-dim",
        "2",
        "--seed",
        seed,
    ])
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&skipgru(&["--help"])), 0);
    assert_eq!(code(&skipgru(&["train", "--help"])), 0);
    assert_eq!(code(&skipgru(&["--version"])), 0);
    let bad = skipgru(&["frobnicate"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert_eq!(code(&skipgru(&["train", "--epochs", "many"])), 2);
    assert_eq!(code(&skipgru(&["predict"])), 2);
}

#[test]
fn gen_data_is_deterministic_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = gen(&a, "7");
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("sessions=60"));
    assert_eq!(code(&gen(&b, "7")), 0);
    for f in [
        "tracks.csv",
        "sessions.csv",
        "holdout.csv",
        "holdout_infer.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    assert_eq!(code(&gen(&c, "8")), 0);
    assert_ne!(
        std::fs::read(a.join("sessions.csv")).unwrap(),
        std::fs::read(c.join("sessions.csv")).unwrap()
    );
    let few = skipgru(&["gen-data", "--out-dir", &s(&c), "--tracks", "10"]);
    assert_eq!(code(&few), 2);
}

#[test]
fn embed_is_deterministic_and_reports_the_trend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gen(d, "3")), 0);
    let sessions = s(&d.join("sessions.csv"));
    let run = |out: &str| {
        skipgru(&[
            "embed",
            "--sessions",
            &sessions,
            "--out",
            &s(&d.join(out)),
            "--dims",
            "8",
            "--epochs",
            "10",
        ])
    };
    let first = run("e1.txt");
    assert_eq!(code(&first), 0);
    assert!(
        stdout(&first).contains("loss_trend=decreasing"),
        "{}",
        stdout(&first)
    );
    assert_eq!(code(&run("e2.txt")), 0);
    assert_eq!(
        std::fs::read(d.join("e1.txt")).unwrap(),
        std::fs::read(d.join("e2.txt")).unwrap()
    );
    assert_eq!(code(&skipgru(&["embed"])), 2);
    let missing = skipgru(&["embed", "--sessions", &s(&d.join("nope.csv"))]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn train_predict_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gen(d, "5")), 0);
    let p = |f: &str| s(&d.join(f));
    assert_eq!(
        code(&skipgru(&[
            "embed",
            "--sessions",
            &p("sessions.csv"),
            "--out",
            &p("emb.txt"),
            "--dims",
            "4"
        ])),
        0
    );
    let (sessions, tracks, emb) = (p("sessions.csv"), p("tracks.csv"), p("emb.txt"));
    let train = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--sessions",
            &sessions,
            "--tracks",
            &tracks,
            "--embeddings",
            &emb,
            "--hidden",
            "4",
            "--batch-size",
            "16",
            "--out",
            out,
        ];
        args.extend_from_slice(extra);
        skipgru(&args)
    };
    let (m1, m2, m0) = (p("m1.ckpt"), p("m2.ckpt"), p("m0.ckpt"));
    let t = train(&m1, &["--epochs", "2", "--batchnorm", "true"]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    assert!(stdout(&t).contains("epoch=2 "));
    assert_eq!(
        code(&train(&m2, &["--epochs", "2", "--batchnorm", "true"])),
        0
    );
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    let init = train(&m0, &["--epochs", "0"]);
    assert_eq!(code(&init), 0);
    assert!(stdout(&init).contains("best_epoch=0"));

    let sub = p("sub.txt");
    let pred = skipgru(&[
        "predict",
        "--model",
        &m1,
        "--model",
        &m0,
        "--sessions",
        &p("holdout_infer.csv"),
        "--tracks",
        &p("tracks.csv"),
        "--out",
        &sub,
    ]);
    assert_eq!(code(&pred), 0, "{}", String::from_utf8_lossy(&pred.stderr));
    assert!(stdout(&pred).contains("models=2"));
    let lines = std::fs::read_to_string(&sub).unwrap();
    assert_eq!(lines.lines().count(), 12);
    assert!(lines
        .lines()
        .all(|l| (5..=10).contains(&l.len()) && l.chars().all(|c| c == '0' || c == '1')));

    let breakdown = p("positions.csv");
    let eval = skipgru(&[
        "evaluate",
        "--truth",
        &p("holdout.csv"),
        "--submission",
        &sub,
        "--breakdown",
        &breakdown,
    ]);
    assert_eq!(code(&eval), 0);
    let report = stdout(&eval);
    let aa: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("mean_aa="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&aa));
    assert!(std::fs::read_to_string(&breakdown).unwrap().lines().count() > 1);

    let mut corrupt = std::fs::read(&m1).unwrap();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    let bad = p("bad.ckpt");
    std::fs::write(&bad, corrupt).unwrap();
    let rejected = skipgru(&[
        "predict",
        "--model",
        &bad,
        "--sessions",
        &p("holdout_infer.csv"),
        "--tracks",
        &p("tracks.csv"),
        "--out",
        &p("x.txt"),
    ]);
    assert_eq!(code(&rejected), 3);
    assert!(String::from_utf8_lossy(&rejected.stderr).contains("integrity"));

    let short = p("short.txt");
    std::fs::write(&short, "1\n").unwrap();
    let misaligned = skipgru(&[
        "evaluate",
        "--truth",
        &p("holdout.csv"),
        "--submission",
        &short,
    ]);
    assert_eq!(code(&misaligned), 3);
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gen(d, "9")), 0);
    let out = skipgru(&[
        "train",
        "--sessions",
        &s(&d.join("sessions.csv")),
        "--tracks",
        &s(&d.join("tracks.csv")),
        "--hidden",
        "4",
        "--epochs",
        "3",
        "--lr",
        "1e300",
        "--out",
        &s(&d.join("m.ckpt")),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("m.ckpt").exists());
}

#[test]
fn config_file_values_apply_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gen(d, "4")), 0);
    let cfg = d.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[paths]\nsessions = {:?}\ntracks = {:?}\ncheckpoint_dir = {:?}\n\
             [model]\nhidden_size = 3\n[training]\nepochs = 1\nbatch_size = 16\n",
            s(&d.join("sessions.csv")),
            s(&d.join("tracks.csv")),
            s(&d.join("ckpts"))
        ),
    )
    .unwrap();
    let c = s(&cfg);
    let from_file = skipgru(&["--config", &c, "train"]);
    assert_eq!(
        code(&from_file),
        0,
        "{}",
        String::from_utf8_lossy(&from_file.stderr)
    );
    assert!(stdout(&from_file).contains("variant=relu-h3-nobn"));
    assert!(d.join("ckpts/model.ckpt").exists());

    let overridden = skipgru(&[
        "--config",
        &c,
        "train",
        "--hidden",
        "5",
        "--activation",
        "elu",
    ]);
    assert_eq!(code(&overridden), 0);
    assert!(stdout(&overridden).contains("variant=elu-h5-nobn"));

    std::fs::write(&cfg, "[model]\nhiden_size = 3\n").unwrap();
    assert_eq!(code(&skipgru(&["--config", &c, "train"])), 2);
}
