//! End-to-end experiment runs on a reduced toy configuration.

use modmask_core::config::ExperimentConfig;
use modmask_core::corpus::{ClipSource, Split};
use modmask_core::eval::{ablate, read_results_csv, write_report, write_results_csv, AblationKind, Experiment, RunSpec};
use modmask_core::trainer::Phase;

fn config() -> ExperimentConfig {
    ExperimentConfig::toy()
        .with_overrides(&[
            "data.n_clips=1000",
            "pretrain_data.n_clips=1000",
            "pretrain.total_steps=60",
            "pretrain.eval_every_steps=30",
            "finetune.total_steps=150",
            "finetune.eval_every_steps=50",
        ])
        .unwrap()
}

#[test]
fn scratch_training_beats_the_random_baseline() {
    let cfg = config();
    let (pre, data) = cfg.generate_corpora().unwrap();
    let exp = Experiment::new(&pre, &data, cfg.model.clone(), cfg.pretrain_train(), cfg.finetune_train(Phase::Finetune));
    let row = exp.run(&RunSpec::scratch(0)).unwrap();
    let n_test = data.manifest().split_ids(Split::Test).len();
    // a random ranking puts the true clip in the top 10 with probability 10/N
    let baseline = 10.0 / n_test as f64;
    assert!(row.r10 > 2.0 * baseline, "R@10 {} vs random {baseline}", row.r10);
    assert!(row.mnr < (n_test as f64 + 1.0) / 2.0, "MnR {}", row.mnr);
}

#[test]
fn ablation_results_round_trip_through_csv_and_report() {
    let cfg = config().with_overrides(&["finetune.total_steps=20", "finetune.eval_every_steps=10"]).unwrap();
    let (pre, data) = cfg.generate_corpora().unwrap();
    let exp = Experiment::new(&pre, &data, cfg.model.clone(), cfg.pretrain_train(), cfg.finetune_train(Phase::Finetune));
    let rows = ablate(&exp, AblationKind::SingleModality, &[0.8], &[0]).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.modality.as_str()).collect();
    assert_eq!(labels, ["all", "rgb", "audio", "asr"]);
    assert!(rows.iter().all(|r| r.p == Some(0.8) && r.phase == "finetune"));

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("results.csv");
    write_results_csv(&csv, &rows).unwrap();
    assert_eq!(read_results_csv(&csv).unwrap(), rows);
    let summary = write_report(&rows, dir.path()).unwrap();
    assert_eq!(summary.len(), 4);
    let first = std::fs::read(dir.path().join("table.txt")).unwrap();
    write_report(&read_results_csv(&csv).unwrap(), dir.path()).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("table.txt")).unwrap());
}
