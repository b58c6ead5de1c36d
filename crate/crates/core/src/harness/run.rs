use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{read_metrics, MetricsWriter};
use crate::envs::EnvId;
use crate::hyperrl::{build_scheduler, Learner, LearnerConfig, Scheduler, SchedulerKind, StepRecord};
use crate::nn::codec::net_to_bytes;
use crate::pg::PgAlgorithm;
use crate::{Error, Result};

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "EPGT_OUT_DIR";
/// Caps the number of seeds trained concurrently.
pub const JOBS_ENV: &str = "EPGT_JOBS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub env: EnvId,
    pub algo: PgAlgorithm,
    pub scheduler: SchedulerKind,
    pub env_steps: u64,
    pub update_steps: u64,
    pub learning_episodes: u64,
    pub episodes_completed: u64,
    /// Env step at which the trailing mean first reached the threshold.
    pub solved_at: Option<u64>,
    pub final_trailing_mean: Option<f64>,
    /// How often each hyper-action was chosen.
    pub action_counts: Vec<u64>,
    pub memory_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

/// A finished seed: the summary plus the trained state.
pub struct TrainedSeed {
    pub summary: RunSummary,
    pub learner: Learner,
    pub scheduler: Scheduler,
}

/// Trains one seed, handing every step record to `sink`. Nothing is
/// written to disk.
pub fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainedSeed> {
    cfg.validate()?;
    let start = Instant::now();
    let learner_cfg = LearnerConfig {
        algo: cfg.algo,
        env: cfg.env,
        hp: cfg.pg_hyperparams(),
        hidden: cfg.hidden(),
        u: cfg.u,
        seed,
        solve: cfg.solve,
        hyper_return: cfg.hyper_return,
    };
    let mut learner = Learner::new(learner_cfg, cfg.encoder.n_order)?;
    let space = cfg.action_space()?;
    let total_updates = learner.planned_updates(cfg.total_env_steps);
    let mem_cfg = cfg.memory.resolve(cfg.encoder.latent_dim, space.size(), total_updates);
    let mut scheduler = build_scheduler(
        cfg.scheduler,
        &space,
        &learner,
        &cfg.encoder,
        Some(mem_cfg),
        total_updates,
        seed,
    )?;
    let mut counts = vec![0u64; space.size()];
    let wall_clock = cfg.metrics.wall_clock;
    while learner.env_steps() < cfg.total_env_steps && !(cfg.stop_on_solve && learner.solved_at().is_some()) {
        learner.run_learning_episode(&space, &mut scheduler, &mut |mut rec| {
            counts[rec.action] += 1;
            if wall_clock {
                rec.wall_clock_ms = Some(start.elapsed().as_millis() as u64);
            }
            sink(&rec)
        })?;
    }
    scheduler.finish()?;
    let summary = RunSummary {
        run_id: cfg.run_name(),
        seed,
        env: cfg.env,
        algo: cfg.algo,
        scheduler: cfg.scheduler,
        env_steps: learner.env_steps(),
        update_steps: learner.update_steps(),
        learning_episodes: learner.learning_episodes(),
        episodes_completed: learner.episodes_completed(),
        solved_at: learner.solved_at(),
        final_trailing_mean: learner.trailing_mean(),
        action_counts: counts,
        memory_size: scheduler.epgt().map(|s| s.memory.len()),
        log_std: learner.nets.log_std.clone(),
        wall_clock_ms: wall_clock.then(|| start.elapsed().as_millis() as u64),
    };
    Ok(TrainedSeed {
        summary,
        learner,
        scheduler,
    })
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

/// Trains one seed and writes its artifacts under `dir`:
/// `metrics.jsonl`, `policy.net`, `value.net`, `summary.json`, plus
/// `memory.bin` and `encoder.bin` for EPGT runs.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    let mut writer = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let run_id = cfg.run_name();
    let trained = train_seed(cfg, seed, &mut |rec| writer.write(&run_id, seed, rec))?;
    std::fs::write(dir.join("policy.net"), net_to_bytes(&trained.learner.nets.policy))?;
    std::fs::write(dir.join("value.net"), net_to_bytes(&trained.learner.nets.value))?;
    if let Some(epgt) = trained.scheduler.epgt() {
        epgt.memory.save(&dir.join("memory.bin"))?;
        std::fs::write(dir.join("encoder.bin"), epgt.encoder.snapshot())?;
    }
    let json = serde_json::to_string_pretty(&trained.summary).map_err(|e| Error::Corrupt(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(trained.summary)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl RunOptions {
    /// Explicit options win over the environment, which wins over the config.
    pub fn resolve_out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.out_dir.clone())
    }

    pub fn resolve_jobs(&self) -> Result<usize> {
        if let Some(j) = self.jobs {
            return if j == 0 {
                Err(Error::Config("jobs must be positive".into()))
            } else {
                Ok(j)
            };
        }
        match std::env::var(JOBS_ENV) {
            Ok(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&j| j > 0)
                .ok_or_else(|| Error::Config(format!("{JOBS_ENV} must be a positive integer, got {v:?}"))),
            Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub seeds: Vec<SeedResult>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.seeds.iter().filter(|s| s.outcome.is_err()).count()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

/// Runs every seed of `cfg` into `<out_dir>/<run name>/seed_<s>/`. A seed
/// that errors or panics is reported without stopping the others.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let run_dir = opts.resolve_out_dir(cfg).join(cfg.run_name());
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml_string())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.resolve_jobs()?)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let seeds = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let dir = seed_dir(&run_dir, seed);
                let outcome = match catch_unwind(AssertUnwindSafe(|| run_seed(cfg, seed, &dir))) {
                    Ok(Ok(s)) => Ok(s),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(p) => Err(format!("panicked: {}", panic_message(p))),
                };
                SeedResult { seed, outcome }
            })
            .collect()
    });
    Ok(ExperimentReport { run_dir, seeds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub records: usize,
    /// First differing record: (index, stored, replayed).
    pub first_difference: Option<(usize, String, String)>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.first_difference.is_none()
    }
}

/// Retrains a seed in memory and compares its records with the stored
/// `metrics.jsonl`. Wall-clock fields are ignored.
pub fn replay(cfg: &ExperimentConfig, seed: u64, seed_dir: &Path) -> Result<ReplayReport> {
    let stored = read_metrics(&seed_dir.join("metrics.jsonl"))?;
    let mut cfg = cfg.clone();
    cfg.metrics.wall_clock = false;
    let mut writer = MetricsWriter::new(Vec::new());
    let run_id = cfg.run_name();
    train_seed(&cfg, seed, &mut |rec| writer.write(&run_id, seed, rec))?;
    let text = String::from_utf8(writer.into_inner()).map_err(|e| Error::Corrupt(e.to_string()))?;
    let replayed: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Corrupt(e.to_string())))
        .collect::<Result<_>>()?;
    let strip = |v: &serde_json::Value| {
        let mut v = v.clone();
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_clock_ms");
        }
        v
    };
    let n = stored.len().max(replayed.len());
    for i in 0..n {
        let a = stored.get(i).map(strip);
        let b = replayed.get(i).map(strip);
        if a != b {
            let show = |v: Option<serde_json::Value>| v.map(|v| v.to_string()).unwrap_or_else(|| "<missing>".into());
            return Ok(ReplayReport {
                records: replayed.len(),
                first_difference: Some((i, show(a), show(b))),
            });
        }
    }
    Ok(ReplayReport {
        records: replayed.len(),
        first_difference: None,
    })
}
