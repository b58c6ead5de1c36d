//! Experiment configuration, seeded runs, metrics streams and artifact
//! inspection.

pub mod config;
pub mod inspect;
pub mod metrics;
pub mod run;

pub use config::{ExperimentConfig, MemorySettings, MetricsSettings, PgOverrides};
pub use inspect::{export_csv, summarize_memory, MemorySummary};
pub use metrics::{read_metrics, MetricsWriter};
pub use run::{
    replay, run_experiment, run_seed, seed_dir, train_seed, ExperimentReport, ReplayReport, RunOptions,
    RunSummary, SeedResult, TrainedSeed,
};
