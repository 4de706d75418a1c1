//! Experiment plumbing: configuration files, data generation and storage,
//! per-round metrics, summaries, checkpoints and run comparison.

mod compare;
mod config;
mod data;
mod run;

pub use compare::{compare, Comparison};
pub use config::{
    Algorithm, BaselineSection, DataConfig, Dims, EvalSection, ExperimentConfig, KernelSection, ModelKind, Partition,
    SCHEMA_VERSION,
};
pub use data::{
    build_corpus, generate_softmax, generate_synthetic, partition_sizes, train_test_split, Corpus, SyntheticGroundTruth,
    DATASET_FORMAT,
};
pub use run::{
    initial_theta, load_summary, run_experiment, run_experiment_from, run_files, write_config_copy, ClientReliability,
    Metrics, MetricsRow, RunSummary, UqReport, ABSENT, CHECKPOINT_LATEST, METRICS_FILE, METRIC_COLUMNS, SUMMARY_FILE,
};
