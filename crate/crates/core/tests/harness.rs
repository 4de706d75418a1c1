mod common;

use std::path::Path;
use std::process::Command;

use common::run_in_tempdir;
use fedpop::harness::{
    build_corpus, compare, load_summary, run_experiment, Algorithm, Corpus, ExperimentConfig, ABSENT, CHECKPOINT_LATEST,
    METRICS_FILE, METRIC_COLUMNS, SUMMARY_FILE,
};

fn small(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic_default();
    c.master_seed = seed;
    c.dims.b = 20;
    c.schedules.rounds = 10;
    c.eval.every = 5;
    c
}

fn metric_lines(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn zero_round_run_writes_header_and_initial_summary() {
    let mut c = small(1);
    c.schedules.rounds = 0;
    let (dir, out) = run_in_tempdir(c);
    let summary = out.unwrap();
    let run = dir.path().join("run");
    assert_eq!(metric_lines(&run), vec![METRIC_COLUMNS.join(",")]);
    assert_eq!(summary.status, "completed");
    assert_eq!(summary.rounds_completed, 0);
    assert_eq!(summary.initial, summary.final_metrics);
    assert!(summary.initial.principal_angle_distance.is_some());
    assert!(summary.initial.objective_gap.unwrap() >= 0.0);
    assert_eq!(load_summary(&run).unwrap(), summary);
}

#[test]
fn every_algorithm_writes_its_outputs() {
    for algorithm in [Algorithm::Fedsoul, Algorithm::Fedavg, Algorithm::Fedrep, Algorithm::LocalOnly, Algorithm::CentralizedSa] {
        let mut c = small(2);
        c.algorithm = algorithm;
        let (dir, out) = run_in_tempdir(c);
        let summary = out.unwrap();
        let run = dir.path().join("run");
        assert!(run.join(SUMMARY_FILE).exists());
        let lines = metric_lines(&run);
        assert_eq!(lines[0], METRIC_COLUMNS.join(","));
        assert!(lines.len() >= 2, "{algorithm:?}");
        let last: Vec<&str> = lines.last().unwrap().split(',').collect();
        assert_eq!(last.len(), METRIC_COLUMNS.len());
        assert_eq!(last[0], "10");
        assert_eq!(last[1], algorithm.name());
        // linear-Gaussian runs leave the classification columns absent
        assert!(last[METRIC_COLUMNS.len() - 4..].iter().all(|v| *v == ABSENT), "{last:?}");
        assert!(summary.final_metrics.principal_angle_distance.is_some());
        assert_eq!(summary.rounds_completed, 10);
        assert_eq!(summary.status, "completed");
    }
}

#[test]
fn softmax_run_reports_calibration() {
    let mut c = ExperimentConfig::softmax_default();
    c.schedules.rounds = 5;
    c.eval.every = 5;
    let (_dir, out) = run_in_tempdir(c);
    let s = out.unwrap();
    let m = &s.final_metrics;
    assert!(m.principal_angle_distance.is_none());
    assert!(m.accuracy.is_some() && m.ece.is_some() && m.entropy_in.is_some() && m.entropy_ood.is_some());
    let uq = s.uq.unwrap();
    assert_eq!(uq.per_client.len(), ExperimentConfig::softmax_default().dims.b);
}

#[test]
fn failed_run_keeps_partial_outputs() {
    let mut c = small(3);
    c.algorithm = Algorithm::Fedavg;
    c.baseline.local_lr = 50.0;
    let (dir, out) = run_in_tempdir(c);
    assert!(out.is_err());
    let run = dir.path().join("run");
    let summary = load_summary(&run).unwrap();
    assert_eq!(summary.status, "failed");
    assert!(summary.error.unwrap().contains("diverged"));
    assert_eq!(metric_lines(&run)[0], METRIC_COLUMNS.join(","));
}

#[test]
fn compare_lines_runs_up_by_round() {
    let root = tempfile::tempdir().unwrap();
    let mut a = small(4);
    a.output_dir = root.path().join("soul");
    let mut b = small(4);
    b.algorithm = Algorithm::Fedavg;
    b.output_dir = root.path().join("avg");
    b.eval.every = 10;
    run_experiment(&a).unwrap();
    run_experiment(&b).unwrap();

    let same = compare(&[a.output_dir.clone(), a.output_dir.clone()]).unwrap();
    let width = (same.header.len() - 1) / 2;
    for row in &same.rows {
        assert_eq!(row[1..=width], row[width + 1..]);
    }
    assert_eq!(same.winners["pad"], vec!["soul".to_string(), "soul#2".to_string()]);

    let both = compare(&[a.output_dir.clone(), b.output_dir.clone()]).unwrap();
    let rounds: Vec<&str> = both.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(rounds, ["5", "10"]);
    // FedAvg has no row at round 5, and no objective gap anywhere
    let col = |name: &str| both.header.iter().position(|h| h == name).unwrap();
    assert_eq!(both.rows[0][col("avg:pad")], ABSENT);
    assert_eq!(both.rows[1][col("avg:objective_gap")], ABSENT);
    assert_ne!(both.rows[1][col("soul:objective_gap")], ABSENT);
    assert!(both.winners.contains_key("pad"));

    let mut other = small(5);
    other.output_dir = root.path().join("other");
    run_experiment(&other).unwrap();
    let err = compare(&[a.output_dir.clone(), other.output_dir]).unwrap_err();
    assert!(err.to_string().contains("seed"), "{err}");
}

#[test]
fn dataset_file_is_used_verbatim() {
    let root = tempfile::tempdir().unwrap();
    let c = small(6);
    let corpus = build_corpus(&c).unwrap();
    let path = root.path().join("data.json");
    corpus.save(&path).unwrap();
    assert_eq!(Corpus::load(&path).unwrap(), corpus);

    // a different seed would generate different data; the file wins
    let mut from_file = small(7);
    from_file.dataset_file = Some(path);
    assert_eq!(build_corpus(&from_file).unwrap().train, corpus.train);
    from_file.dims.b = 19;
    assert!(build_corpus(&from_file).is_err());
}

fn fedpop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedpop"))
}

#[test]
fn cli_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let out = fedpop().args(["init", "--preset", "synthetic"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), ExperimentConfig::synthetic_default());

    let mut c = small(8);
    c.eval.checkpoint_every = 5;
    let cfg = root.path().join("config.toml");
    std::fs::write(&cfg, c.to_toml_string().unwrap()).unwrap();
    let run = root.path().join("run");
    let status = fedpop()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&run)
        .args(["--rounds", "6", "--serial"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(run.join("config.toml").exists());
    let summary = load_summary(&run).unwrap();
    assert_eq!(summary.rounds_completed, 6);

    let eval = fedpop().arg("evaluate").arg("--run-dir").arg(&run).output().unwrap();
    assert!(eval.status.success());
    let shown: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(shown["rounds_completed"], 6);

    let table = root.path().join("cmp.csv");
    let cmp = fedpop().arg("compare").arg(&run).arg(&run).arg("--out").arg(&table).output().unwrap();
    assert!(cmp.status.success());
    assert!(std::fs::read_to_string(&table).unwrap().starts_with("round,"));

    let uq = fedpop()
        .arg("uq")
        .arg("--config")
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(run.join(CHECKPOINT_LATEST))
        .args(["--client", "3", "--samples", "50", "--burn", "10"])
        .output()
        .unwrap();
    assert!(uq.status.success(), "{}", String::from_utf8_lossy(&uq.stderr));
    let report: serde_json::Value = serde_json::from_slice(&uq.stdout).unwrap();
    assert_eq!(report["client"], 3);
    assert_eq!(report["round"], 5);
    assert_eq!(report["posterior_mean"].as_array().unwrap().len(), c.dims.d);

    let data = root.path().join("data.json");
    let generated = fedpop().arg("generate").arg("--config").arg(&cfg).arg("--out").arg(&data).output().unwrap();
    assert!(generated.status.success());
    assert_eq!(Corpus::load(&data).unwrap(), build_corpus(&c).unwrap());
}

#[test]
fn cli_rejects_bad_config_with_the_field_name() {
    let root = tempfile::tempdir().unwrap();
    let mut c = small(9);
    c.data.noise_var = -1.0;
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, c.to_toml_string().unwrap()).unwrap();
    let out = fedpop().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("data.noise_var"), "{err}");

    let typo = root.path().join("typo.toml");
    std::fs::write(&typo, c.to_toml_string().unwrap().replace("noise_var", "noise_variance")).unwrap();
    let out = fedpop().args(["run", "--config"]).arg(&typo).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("noise_variance"));

    let out = fedpop().args(["run", "--config"]).arg(root.path().join("missing.toml")).output().unwrap();
    assert!(!out.status.success());
}
