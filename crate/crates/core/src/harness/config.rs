use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::envs::EnvId;
use crate::hyperrl::{build_action_space, HyperActionSpace, HyperReturn, HyperparamSpec, SchedulerKind, SolveCriterion};
use crate::memory::{BetaSchedule, MemoryConfig};
use crate::pg::{PGHyperparams, PgAlgorithm, DEFAULT_HIDDEN};
use crate::{Error, Result};

/// Optional overrides of the algorithm's default PG hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgOverrides {
    pub learning_rate: Option<f64>,
    pub gae_lambda: Option<f64>,
    pub clip: Option<f64>,
    pub batch_size: Option<usize>,
    pub value_coef: Option<f64>,
    pub entropy_coef: Option<f64>,
    pub discount: Option<f64>,
    pub horizon: Option<usize>,
    pub ppo_epochs: Option<usize>,
    pub num_workers: Option<usize>,
    pub max_grad_norm: Option<f64>,
    /// Hidden layer widths of both the policy and value networks.
    pub hidden: Option<Vec<usize>>,
}

impl PgOverrides {
    pub fn apply(&self, mut hp: PGHyperparams) -> PGHyperparams {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { hp.$f = v; } )* };
        }
        take!(
            learning_rate,
            gae_lambda,
            clip,
            batch_size,
            value_coef,
            entropy_coef,
            discount,
            horizon,
            ppo_epochs,
            num_workers,
            max_grad_norm
        );
        hp
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySettings {
    /// Defaults to half the planned policy-update count.
    pub capacity: Option<usize>,
    pub k_read: Option<usize>,
    pub k_write: Option<usize>,
    pub beta: Option<f64>,
    pub beta_schedule: Option<BetaSchedule>,
}

impl MemorySettings {
    pub fn resolve(&self, key_dim: usize, num_actions: usize, planned_updates: u64) -> MemoryConfig {
        let mut cfg = MemoryConfig::new(
            key_dim,
            num_actions,
            self.capacity.unwrap_or((planned_updates / 2).max(1) as usize),
        );
        if let Some(k) = self.k_read {
            cfg.k_read = k;
        }
        if let Some(k) = self.k_write {
            cfg.k_write = k;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(s) = self.beta_schedule {
            cfg.beta_schedule = s;
        }
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSettings {
    /// Adds elapsed milliseconds to every record. Off by default so
    /// repeated runs produce identical files.
    pub wall_clock: bool,
}

fn default_u() -> usize {
    10
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment: a scheduler on an environment, repeated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub env: EnvId,
    pub algo: PgAlgorithm,
    pub scheduler: SchedulerKind,
    #[serde(default)]
    pub hyperparams: Vec<HyperparamSpec>,
    /// Policy updates per learning episode (A2C).
    #[serde(default = "default_u")]
    pub u: usize,
    pub total_env_steps: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pg: PgOverrides,
    #[serde(default)]
    pub memory: MemorySettings,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub metrics: MetricsSettings,
    #[serde(default)]
    pub hyper_return: HyperReturn,
    /// Used for the reported solve step; also ends a run early when
    /// `stop_on_solve` is set.
    #[serde(default)]
    pub solve: SolveCriterion,
    #[serde(default)]
    pub stop_on_solve: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "{}-{}-{}",
                self.env.as_str(),
                serde_json::to_value(self.algo).expect("serializes").as_str().unwrap_or("pg"),
                serde_json::to_value(self.scheduler).expect("serializes").as_str().unwrap_or("sched")
            )
        })
    }

    pub fn pg_hyperparams(&self) -> PGHyperparams {
        self.pg.apply(PGHyperparams::defaults_for(self.algo))
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.pg.hidden.clone().unwrap_or_else(|| DEFAULT_HIDDEN.to_vec())
    }

    /// The scheduled hyperparameters; a fixed run without any gets a
    /// single-bin learning rate.
    pub fn action_space(&self) -> Result<HyperActionSpace> {
        let hp = self.pg_hyperparams();
        if self.hyperparams.is_empty() {
            return build_action_space(&[HyperparamSpec::learning_rate(1)], &hp);
        }
        build_action_space(&self.hyperparams, &hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seed {s} listed twice")));
            }
        }
        if self.total_env_steps == 0 {
            return Err(Error::Config("total_env_steps must be positive".into()));
        }
        if self.u == 0 {
            return Err(Error::Config("u must be positive".into()));
        }
        if self.scheduler != SchedulerKind::Fixed && self.hyperparams.is_empty() {
            return Err(Error::Config("rnd and epgt schedulers need at least one hyperparameter".into()));
        }
        let hidden = self.hidden();
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.pg_hyperparams().validate(self.algo)?;
        let space = self.action_space()?;
        let hp = self.pg_hyperparams();
        for i in 0..space.size() {
            space.apply(i, &hp)?.validate(self.algo)?;
        }
        if self.scheduler == SchedulerKind::Epgt {
            let mut probe = self.memory.resolve(self.encoder.latent_dim, space.size(), 2);
            probe.capacity = probe.capacity.max(1);
            crate::memory::EpisodicMemory::new(probe)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
env = "cartpole"
algo = "a2c"
scheduler = "epgt"
total_env_steps = 1000
seeds = [0, 1]

[[hyperparams]]
name = "learning_rate"
kind = "lr_multiplicative"
bins = 5

[pg]
entropy_coef = 0.02

[memory]
k_write = 5
"#;

    #[test]
    fn parses_and_applies_overrides() {
        let cfg = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(cfg.u, 10);
        assert_eq!(cfg.pg_hyperparams().entropy_coef, 0.02);
        assert_eq!(cfg.pg_hyperparams().learning_rate, 7e-4);
        assert_eq!(cfg.action_space().unwrap().size(), 5);
        assert_eq!(cfg.memory.resolve(32, 5, 100).k_write, 5);
        assert_eq!(cfg.memory.resolve(32, 5, 100).capacity, 50);
        assert!(!cfg.metrics.wall_clock);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str(&EXAMPLE.replace("seeds = [0, 1]", "seeds = []")).is_err());
        assert!(ExperimentConfig::from_toml_str(&EXAMPLE.replace("bins = 5", "bins = 4")).is_err());
        assert!(ExperimentConfig::from_toml_str(&EXAMPLE.replace("cartpole", "pong")).is_err());
        assert!(ExperimentConfig::from_toml_str(&format!("{EXAMPLE}\nbogus = 1")).is_err());
    }
}
