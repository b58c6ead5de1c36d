use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use epgt::harness::{self, ExperimentConfig, RunOptions};
use epgt::memory::EpisodicMemory;

#[derive(Parser)]
#[command(name = "epgt", version, about = "Episodic policy gradient training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured seeds, e.g. `--seeds 0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory (beats EPGT_OUT_DIR and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds trained concurrently (beats EPGT_JOBS).
        #[arg(long)]
        jobs: Option<usize>,
        /// Overrides total_env_steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a memory snapshot and optionally export it as CSV.
    InspectMemory {
        path: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Retrain one seed and compare against its stored metrics.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Seed directory holding metrics.jsonl; defaults to the run layout.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(config: PathBuf, seeds: Option<Vec<u64>>, out: Option<PathBuf>, jobs: Option<usize>, steps: Option<u64>) -> Result<bool> {
    let mut cfg = load(&config)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(s) = steps {
        cfg.total_env_steps = s;
    }
    cfg.validate()?;
    let report = harness::run_experiment(&cfg, &RunOptions { out_dir: out, jobs })?;
    println!("run dir {}", report.run_dir.display());
    for s in &report.seeds {
        match &s.outcome {
            Ok(sum) => println!(
                "seed {:>4}  ok  env_steps {}  updates {}  solved_at {}  trailing_mean {}",
                s.seed,
                sum.env_steps,
                sum.update_steps,
                sum.solved_at.map_or("-".into(), |v| v.to_string()),
                sum.final_trailing_mean.map_or("-".into(), |v| format!("{v:.1}")),
            ),
            Err(e) => println!("seed {:>4}  FAILED  {e}", s.seed),
        }
    }
    Ok(report.failures() == 0)
}

fn verify(seed: u64) -> Result<bool> {
    let lines = epgt::oracle::verify(seed)?;
    let mut ok = true;
    for l in &lines {
        println!("{} {}  {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
        ok &= l.passed;
    }
    println!("{}/{} checks passed", lines.iter().filter(|l| l.passed).count(), lines.len());
    Ok(ok)
}

fn inspect(path: PathBuf, csv: Option<PathBuf>, json: bool) -> Result<bool> {
    let mem = EpisodicMemory::load(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary = harness::summarize_memory(&mem);
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{summary}");
    }
    if let Some(out) = csv {
        harness::export_csv(&mem, BufWriter::new(File::create(&out)?))?;
        eprintln!("wrote {} rows to {}", mem.len(), out.display());
    }
    Ok(true)
}

fn replay(config: PathBuf, seed: u64, dir: Option<PathBuf>, out: Option<PathBuf>) -> Result<bool> {
    let cfg = load(&config)?;
    if !cfg.seeds.contains(&seed) {
        bail!("seed {seed} is not listed in {}", config.display());
    }
    let dir = dir.unwrap_or_else(|| {
        let opts = RunOptions { out_dir: out, jobs: None };
        harness::seed_dir(&opts.resolve_out_dir(&cfg).join(cfg.run_name()), seed)
    });
    let report = harness::replay(&cfg, seed, &dir)?;
    match &report.first_difference {
        None => println!("identical: {} records", report.records),
        Some((i, a, b)) => println!("record {i} differs\nstored:   {a}\nreplayed: {b}"),
    }
    Ok(report.identical())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seeds,
            out,
            jobs,
            steps,
        } => train(config, seeds, out, jobs, steps),
        Command::Verify { seed } => verify(seed),
        Command::InspectMemory { path, csv, json } => inspect(path, csv, json),
        Command::Replay { config, seed, dir, out } => replay(config, seed, dir, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
