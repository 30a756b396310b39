//! End-to-end runs of the command line tool on a small configuration.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_diffrx");

const SMALL: &str = r#"
frames = 2
output_dir = "out"

[dataset]
count = 40
path = "data.chd"

[dataset.channel]
n_ant = 4
n_car = 16

[model]
checkpoint = "net.ckpt"
direct_dir = "direct"

[model.network]
n_ant = 4
n_car = 16
depth = 1
token_hidden = 8
channel_hidden = 8
time_embed_dim = 8

[model.train]
epochs = 1

[receiver]
survivors = 2
imaginations = 2
n_gen = 4

[sweep]
snr_db = [0.0, -2.0, -4.0]
n_pilots = [4, 8]
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env("DIFFRX_WORKERS", "1").output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn dataset_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["dataset", "gen", "--count", "6000", "--seed", "7", "--out", "a.chd"]);
    ok(dir.path(), &["dataset", "gen", "--count", "6000", "--seed", "7", "--out", "b.chd"]);
    let a = std::fs::read(dir.path().join("a.chd")).unwrap();
    let b = std::fs::read(dir.path().join("b.chd")).unwrap();
    assert_eq!(a, b);
    ok(dir.path(), &["dataset", "gen", "--count", "6000", "--seed", "8", "--out", "c.chd"]);
    assert_ne!(a, std::fs::read(dir.path().join("c.chd")).unwrap());
}

#[test]
fn sweep_then_report() {
    let dir = small_dir();
    let p = dir.path();
    ok(p, &["sweep", "--config", "small.toml"]);
    let metrics = p.join("out/metrics.csv");
    let mut r = csv::Reader::from_path(&metrics).unwrap();
    assert_eq!(r.records().count(), 6);
    assert!(p.join("out/config.toml").exists() && p.join("net.ckpt").exists() && p.join("data.chd").exists());

    let listed = ok(p, &["report", "--input", "out/metrics.csv", "--out", "fig"]);
    for stem in ["fig_snr", "fig_screening", "fig_imagination", "fig_init", "fig_steps", "fig_pilots", "fig_guidance"] {
        let path = p.join("fig").join(format!("{stem}.csv"));
        assert!(listed.contains(&format!("{stem}.csv")));
        assert_eq!(csv::Reader::from_path(&path).unwrap().records().count(), 6, "{stem}");
    }

    // a second sweep reuses the cached dataset and checkpoint and reproduces
    // every column except the timing
    let first = std::fs::read_to_string(&metrics).unwrap();
    ok(p, &["sweep", "--config", "small.toml"]);
    let second = std::fs::read_to_string(&metrics).unwrap();
    let strip = |s: &str| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_owned()).collect::<Vec<_>>();
    assert_eq!(strip(&first), strip(&second));
}

#[test]
fn receive_and_baseline_run() {
    let dir = small_dir();
    let p = dir.path();
    let line = ok(p, &["receive", "--config", "small.toml", "--snr-db", "-4", "--modulation", "qam16", "--trace", "t.csv"]);
    assert!(line.starts_with("frame 0: nmse"), "{line}");
    let trace = std::fs::read_to_string(p.join("t.csv")).unwrap();
    assert!(trace.starts_with("step,t,best_e,best_nmse,survivors_changed,early_quit"));

    ok(p, &["baseline", "--config", "small.toml", "--frames", "2"]);
    let rows = csv::Reader::from_path(p.join("out/baselines.csv")).unwrap().records().count();
    // five methods over three SNRs and two pilot grids
    assert_eq!(rows, 5 * 6);
    assert!(p.join("direct/direct-gaussian-np8.drx").exists());
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("typo.toml"), "framez = 3\n").unwrap();
    for args in [
        &["sweep", "--config", "missing.toml"][..],
        &["sweep", "--config", "typo.toml"],
        &["report", "--input", "missing.csv"],
        &["dataset", "gen", "--count", "3", "--out", "x.chd"],
    ] {
        let out = run(p, args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{args:?}: {err}");
    }
    assert!(!run(p, &["sweep", "--no-such-flag"]).status.success());
}
