use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pgm_cli::report::{
    read_versioned, AblationTable, CaptureReport, EvalReport, ABLATION_SCHEMA, CAPTURE_SCHEMA,
    EVAL_SCHEMA,
};

const TINY: &str = r#"{
  "schema": "pgm-config/1",
  "seed": 5,
  "data": {"train_sequences": 4, "test_sequences": 2, "frames": 36, "feature_dim": 8},
  "vae": {"epochs": 2, "hidden": 8, "decoder_hidden": 8, "latent_dim": 4},
  "diffusion": {"epochs": 1, "hidden": 8, "rnn_hidden": 8, "train_steps": [2]},
  "guidance": {"steps": 2, "guided_steps": 1},
  "paths": {"dataset": "data.jsonl", "vae": "vae.ckpt", "latent_denoiser": "latent.ckpt"}
}"#;

fn pgm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgm"))
        .current_dir(dir)
        .env("PGM_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = pgm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn trained() -> (tempfile::TempDir, PathBuf) {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let d = dir.path();
    ok(d, &["--config", c, "gen-data", "--out", "data.jsonl"]);
    ok(d, &["--config", c, "train-vae", "--out", "vae.ckpt"]);
    ok(
        d,
        &["--config", c, "train-diffusion", "--out", "latent.ckpt"],
    );
    (dir, cfg)
}

#[test]
fn gen_data_is_reproducible() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-data", "--out", "a.jsonl"]);
    ok(dir.path(), &["--config", c, "gen-data", "--out", "b.jsonl"]);
    ok(
        dir.path(),
        &["--config", c, "--seed", "6", "gen-data", "--out", "c.jsonl"],
    );
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
    let header = String::from_utf8(read("a.jsonl")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.contains("config_hash") && header.contains("\"seed\":\"5\""));
}

#[test]
fn pipeline_end_to_end() {
    let (dir, cfg) = trained();
    let c = cfg.to_str().unwrap();
    let d = dir.path();

    ok(
        d,
        &[
            "--config",
            c,
            "capture",
            "--sequence",
            "4",
            "--out",
            "m1.jsonl",
        ],
    );
    ok(
        d,
        &[
            "--config",
            c,
            "capture",
            "--sequence",
            "4",
            "--out",
            "m2.jsonl",
        ],
    );
    let read = |n: &str| fs::read(d.join(n)).unwrap();
    assert_eq!(read("m1.jsonl"), read("m2.jsonl"));
    assert_eq!(
        read("m1.jsonl.diagnostics.json"),
        read("m2.jsonl.diagnostics.json")
    );
    let report: CaptureReport =
        read_versioned(&d.join("m1.jsonl.diagnostics.json"), CAPTURE_SCHEMA).unwrap();
    assert_eq!(report.diagnostics.steps.len(), 2);
    assert!(report.tracked.is_some());
    assert_eq!(report.provenance["seed"], "5");

    ok(
        d,
        &[
            "--config",
            c,
            "capture",
            "--arm",
            "latent-T0",
            "--out",
            "m0.jsonl",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--pred",
            "m1.jsonl",
            "--gt",
            "m1.jsonl",
            "--out",
            "self.json",
        ],
    );
    let e: EvalReport = read_versioned(&d.join("self.json"), EVAL_SCHEMA).unwrap();
    assert!(
        e.metrics.mpjpe.abs() < 1e-9
            && e.metrics.pa_mpjpe.abs() < 1e-9
            && e.metrics.e_s.abs() < 1e-9
    );
    assert_eq!(e.metrics.pck, 1.0);
    assert_eq!(e.provenance["seed"], "5");
    ok(
        d,
        &[
            "eval",
            "--pred",
            "m0.jsonl",
            "--gt",
            "m1.jsonl",
            "--out",
            "cross.json",
        ],
    );
    let e: EvalReport = read_versioned(&d.join("cross.json"), EVAL_SCHEMA).unwrap();
    assert!(e.metrics.mpjpe > 0.0 && e.metrics.pa_mpjpe <= e.metrics.mpjpe);

    ok(
        d,
        &[
            "--config",
            c,
            "ablate",
            "--arm",
            "latent-T0",
            "--arm",
            "guided-s1-T2",
            "--out",
            "table.json",
        ],
    );
    let t: AblationTable = read_versioned(&d.join("table.json"), ABLATION_SCHEMA).unwrap();
    assert_eq!(
        t.rows.iter().map(|r| r.arm.as_str()).collect::<Vec<_>>(),
        vec!["latent-T0", "guided-s1-T2"]
    );
    assert!(t
        .rows
        .iter()
        .all(|r| r.sequences == 2 && r.metrics.success_rate.is_some()));
    assert!(t.checks.iter().all(|c| c.passed.is_none()));
    let csv = fs::read_to_string(d.join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv
        .lines()
        .next()
        .unwrap()
        .starts_with("arm,sequences,mpjpe,pa_mpjpe"));
    ok(
        d,
        &[
            "--config",
            c,
            "ablate",
            "--arm",
            "latent-T0",
            "--arm",
            "guided-s1-T2",
            "--out",
            "table2.json",
        ],
    );
    assert_eq!(read("table.json"), read("table2.json"));

    let out = pgm(
        d,
        &["--config", c, "--seed", "6", "capture", "--out", "m3.jsonl"],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("produced under config"));
}

#[test]
fn errors_are_categorized() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let c = cfg.to_str().unwrap();

    fs::write(
        d.join("bad.json"),
        r#"{"schema": "pgm-config/1", "vae": {"lr": "fast"}}"#,
    )
    .unwrap();
    let out = pgm(d, &["--config", "bad.json", "gen-data", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vae.lr"));

    let out = pgm(d, &["--config", c, "train-vae", "--out", "v.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.dataset"));

    fs::write(d.join("data.jsonl"), "{\"version\": \"pgm-data/1\"}\n").unwrap();
    let out = pgm(d, &["--config", c, "train-vae", "--out", "v.ckpt"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    ok(d, &["--config", c, "gen-data", "--out", "data.jsonl"]);
    fs::write(d.join("vae.ckpt"), b"not a checkpoint").unwrap();
    let out = pgm(d, &["--config", c, "train-diffusion", "--out", "l.ckpt"]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = pgm(
        d,
        &[
            "--config",
            c,
            "ablate",
            "--arm",
            "guided-s9-T5",
            "--out",
            "t.json",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "checkpoint is loaded before arms are parsed"
    );

    let out = pgm(
        d,
        &["--config", c, "--seed", "1", "train-vae", "--out", "v.ckpt"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn log_level_follows_env() {
    let (dir, cfg) = setup();
    let c = cfg.to_str().unwrap();
    let run = |level: &str| {
        Command::new(env!("CARGO_BIN_EXE_pgm"))
            .current_dir(dir.path())
            .env("PGM_LOG", level)
            .args(["--config", c, "gen-data", "--out", "d.jsonl"])
            .output()
            .unwrap()
    };
    assert!(String::from_utf8_lossy(&run("info").stderr).contains("wrote 6 sequences"));
    assert!(!String::from_utf8_lossy(&run("error").stderr).contains("wrote"));
}
