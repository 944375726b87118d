//! End-to-end runs of the `modmask` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modmask_core::config::ExperimentConfig;
use modmask_core::eval::read_results_csv;

/// Small enough that each training command finishes in about a second.
const TINY: &str = "\
[data]
n_clips = 120

[pretrain_data]
n_clips = 120

[pretrain]
batch_size = 8
total_steps = 6
eval_every_steps = 3

[finetune]
batch_size = 8
total_steps = 6
eval_every_steps = 3
";

fn modmask(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modmask"))
        .args(args)
        .env("MODMASK_OUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        modmask(args, self.dir.path())
    }
}

#[test]
fn full_pipeline_produces_parseable_metrics() {
    let f = Fixture::new();
    let (cfg, d0, p0, f0) = (f.s("tiny.toml"), f.s("d0"), f.s("p0"), f.s("f0"));
    ok(f.run(&["gen-data", "--config", &cfg, "--out", &d0]));
    for name in ["data.mmf", "pretrain.mmf", "data.manifest.jsonl", "config.toml", "run.log"] {
        assert!(f.path("d0").join(name).exists(), "{name}");
    }
    ok(f.run(&["pretrain", "--data", &d0, "--out", &p0]));
    ok(f.run(&["finetune", "--data", &d0, "--init", &p0, "--out", &f0]));
    let out = ok(f.run(&["eval", "--data", &d0, "--model", &f0]));
    let csv = f.path("f0/metrics_test.csv");
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), csv.display().to_string());
    let rows = read_results_csv(&csv).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].phase, "finetune");
    assert_eq!(rows[0].modality, "all");
    assert!((0.0..=1.0).contains(&rows[0].r10));
    for dir in ["p0", "f0"] {
        for name in ["config.toml", "model.ckpt", "state.ckpt", "train_log.csv", "val_log.csv", "run.log"] {
            assert!(f.path(dir).join(name).exists(), "{dir}/{name}");
        }
    }
    // the snapshot alone reproduces the data settings
    let snap = ExperimentConfig::from_file(&f.path("f0/config.toml")).unwrap();
    assert_eq!(snap.data.n_clips, 120);

    ok(f.run(&["eval", "--data", &d0, "--model", &f0, "--modalities", "asr", "--split", "val"]));
    let rows = read_results_csv(&f.path("f0/metrics_val.csv")).unwrap();
    assert_eq!(rows[0].modality, "asr");
}

#[test]
fn overrides_are_recorded_in_the_snapshot() {
    let f = Fixture::new();
    let (cfg, out) = (f.s("tiny.toml"), f.s("p1"));
    ok(f.run(&["pretrain", "--config", &cfg, "--set", "masking.p=1.0", "--out", &out]));
    let snap = ExperimentConfig::from_file(&f.path("p1/config.toml")).unwrap();
    assert_eq!(snap.masking.p, 1.0);
    assert_eq!(snap.pretrain.total_steps, 6);
    let log = std::fs::read_to_string(f.path("p1/train_log.csv")).unwrap();
    assert!(log.lines().skip(1).all(|l| l.ends_with(",asr")), "{log}");
}

#[test]
fn default_output_lands_under_the_environment_root() {
    let f = Fixture::new();
    let cfg = f.s("tiny.toml");
    ok(f.run(&["gen-data", "--config", &cfg]));
    assert!(f.path("gen-data/data.mmf").exists());
}

#[test]
fn ablation_writes_a_results_table_and_report_is_stable() {
    let f = Fixture::new();
    let (cfg, out) = (f.s("tiny.toml"), f.s("ab"));
    let stdout = ok(f.run(&[
        "ablate", "--config", &cfg, "--kind", "p_sweep", "--grid", "1.0,0.8", "--seeds", "2", "--with-scratch", "--out", &out,
    ]))
    .stdout;
    let rows = read_results_csv(&f.path("ab/results.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r.phase == "scratch").count(), 2);
    assert_eq!(rows.iter().filter(|r| r.p == Some(0.8)).count(), 2);
    let table = std::fs::read(f.path("ab/table.txt")).unwrap();
    assert_eq!(stdout, table);

    let results = f.s("ab/results.csv");
    let (r1, r2) = (f.s("rep1"), f.s("rep2"));
    ok(f.run(&["report", "--results", &results, "--out", &r1]));
    ok(f.run(&["report", "--results", &results, "--out", &r2]));
    for name in ["table.csv", "table.txt"] {
        let a = std::fs::read(f.path("rep1").join(name)).unwrap();
        assert_eq!(a, std::fs::read(f.path("rep2").join(name)).unwrap(), "{name}");
        assert_eq!(a, std::fs::read(f.path("ab").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn interrupted_pretraining_resumes_bit_exactly() {
    let f = Fixture::new();
    let (cfg, d, full, part) = (f.s("tiny.toml"), f.s("d"), f.s("full"), f.s("part"));
    ok(f.run(&["gen-data", "--config", &cfg, "--out", &d]));
    ok(f.run(&["pretrain", "--data", &d, "--out", &full]));
    ok(f.run(&["pretrain", "--data", &d, "--out", &part, "--until", "3"]));
    assert!(!f.path("part/model.ckpt").exists());
    let state = f.s("part/state.ckpt");
    ok(f.run(&["pretrain", "--data", &d, "--out", &part, "--resume", &state]));
    let a = std::fs::read(f.path("full/model.ckpt")).unwrap();
    let b = std::fs::read(f.path("part/model.ckpt")).unwrap();
    assert_eq!(a, b);

    // a different config is refused unless forced
    let out = f.run(&["pretrain", "--data", &d, "--out", &part, "--resume", &state, "--set", "pretrain.lr0=0.5"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn errors_map_to_exit_codes() {
    let f = Fixture::new();
    let cfg = f.s("tiny.toml");
    let out = f.s("x");

    let bad_key = f.run(&["pretrain", "--config", &cfg, "--set", "masking.q=0.5", "--out", &out]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("masking.q"));

    let bad_value = f.run(&["pretrain", "--config", &cfg, "--set", "masking.p=2.0", "--out", &out]);
    assert_eq!(bad_value.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_value.stderr).contains("masking"));

    std::fs::write(f.path("unknown.toml"), "[model]\nwidth = 3\n").unwrap();
    let unknown = f.run(&["gen-data", "--config", &f.s("unknown.toml"), "--out", &out]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("model.width"));

    let missing_cfg = f.run(&["gen-data", "--config", &f.s("nope.toml"), "--out", &out]);
    assert_eq!(missing_cfg.status.code(), Some(3));
    let missing_data = f.run(&["pretrain", "--config", &cfg, "--data", &f.s("nowhere"), "--out", &out]);
    assert_eq!(missing_data.status.code(), Some(3));
    let missing_model = f.run(&["eval", "--config", &cfg, "--model", &f.s("nowhere"), "--out", &out]);
    assert_eq!(missing_model.status.code(), Some(3));
    let missing_results = f.run(&["report", "--results", &f.s("nowhere.csv")]);
    assert_eq!(missing_results.status.code(), Some(3));

    // a corrupted store is a runtime failure
    let d = f.s("d");
    ok(f.run(&["gen-data", "--config", &cfg, "--out", &d]));
    let store = f.path("d/data.mmf");
    let mut bytes = std::fs::read(&store).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0xff;
    std::fs::write(&store, bytes).unwrap();
    let corrupt = f.run(&["finetune", "--data", &d, "--out", &out]);
    assert_eq!(corrupt.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("checksum"));

    let unknown_cmd = f.run(&["train"]);
    assert_eq!(unknown_cmd.status.code(), Some(2));
}
