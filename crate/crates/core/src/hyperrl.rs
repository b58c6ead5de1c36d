//! The outer decision process over hyperparameters.
//!
//! A learning episode is U policy-update steps. At each step the scheduler
//! picks a hyper-action (one bin per scheduled hyperparameter), the learner
//! performs the update with those values, and after the last step an
//! environment rollout yields the episode's return G. Only the final step
//! is rewarded, and with a one-step return every step's hyper-return is G.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, RawHyperState};
use crate::envs::EnvId;
use crate::memory::{epsilon_schedule, select_action_with, EpisodicMemory, MemoryConfig};
use crate::nn::Matrix;
use crate::pg::{
    a2c_update, collect_rollout, compute_gae, normalize_advantages, ppo_update_count, EnvRunner, PGHyperparams,
    PgAlgorithm, PgGradients, PgOptimizer, PolicyValueNet, PpoPhase, Rollout, UpdateStats,
};
use crate::rng::{stream, Stream, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinKind {
    UniformBins,
    LrMultiplicative,
}

/// A scheduled hyperparameter as declared in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamSpec {
    pub name: String,
    pub kind: BinKind,
    /// Falls back to the learner's default for `name`.
    #[serde(default)]
    pub default: Option<f64>,
    /// Bin count B (lr kind).
    #[serde(default)]
    pub bins: Option<usize>,
    /// Explicit bin values (uniform kind).
    #[serde(default)]
    pub values: Vec<f64>,
}

impl HyperparamSpec {
    pub fn uniform(name: &str, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            kind: BinKind::UniformBins,
            default: None,
            bins: None,
            values: values.to_vec(),
        }
    }

    pub fn learning_rate(bins: usize) -> Self {
        Self {
            name: "learning_rate".into(),
            kind: BinKind::LrMultiplicative,
            default: None,
            bins: Some(bins),
            values: Vec::new(),
        }
    }
}

/// `{α/k, …, α/2, α, 2α, …, kα}` for `k = 2..=(B+1)/2`, ascending.
pub fn lr_bins(default: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 || bins % 2 == 0 {
        return Err(Error::Hyperparam(format!("learning-rate bin count must be odd, got {bins}")));
    }
    if !(default > 0.0 && default.is_finite()) {
        return Err(Error::Hyperparam(format!("learning-rate default {default} must be positive")));
    }
    let top = (bins + 1) / 2;
    let mut out: Vec<f64> = (2..=top).rev().map(|k| default / k as f64).collect();
    out.push(default);
    out.extend((2..=top).map(|k| default * k as f64));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedParam {
    pub name: String,
    pub default: f64,
    pub values: Vec<f64>,
}

impl ResolvedParam {
    pub fn default_bin(&self) -> usize {
        self.values.iter().position(|v| *v == self.default).expect("default is a bin")
    }
}

/// Cartesian product of per-hyperparameter bins. Flat indices are mixed
/// radix with the last hyperparameter varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperActionSpace {
    params: Vec<ResolvedParam>,
}

impl HyperActionSpace {
    pub fn params(&self) -> &[ResolvedParam] {
        &self.params
    }

    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).product()
    }

    pub fn encode(&self, bins: &[usize]) -> Result<usize> {
        if bins.len() != self.params.len() {
            return Err(Error::mismatch(self.params.len(), bins.len(), "hyper-action tuple"));
        }
        let mut index = 0;
        for (b, p) in bins.iter().zip(&self.params) {
            if *b >= p.values.len() {
                return Err(Error::Hyperparam(format!("bin {b} outside {} for {}", p.values.len(), p.name)));
            }
            index = index * p.values.len() + b;
        }
        Ok(index)
    }

    pub fn decode(&self, index: usize) -> Result<Vec<usize>> {
        if index >= self.size() {
            return Err(Error::Hyperparam(format!("hyper-action {index} outside {}", self.size())));
        }
        let mut bins = vec![0; self.params.len()];
        let mut rest = index;
        for (slot, p) in bins.iter_mut().zip(&self.params).rev() {
            *slot = rest % p.values.len();
            rest /= p.values.len();
        }
        Ok(bins)
    }

    pub fn values(&self, index: usize) -> Result<Vec<f64>> {
        let bins = self.decode(index)?;
        Ok(bins.iter().zip(&self.params).map(|(b, p)| p.values[*b]).collect())
    }

    pub fn default_index(&self) -> usize {
        let bins: Vec<usize> = self.params.iter().map(ResolvedParam::default_bin).collect();
        self.encode(&bins).expect("default bins are valid")
    }

    /// `base` with the hyper-action's values substituted.
    pub fn apply(&self, index: usize, base: &PGHyperparams) -> Result<PGHyperparams> {
        let mut hp = base.clone();
        for (p, v) in self.params.iter().zip(self.values(index)?) {
            hp.set(&p.name, v)?;
        }
        Ok(hp)
    }

    pub fn describe(&self, index: usize) -> Result<BTreeMap<String, f64>> {
        Ok(self.params.iter().map(|p| p.name.clone()).zip(self.values(index)?).collect())
    }

    /// Every action agreeing with `index` on the named hyperparameters.
    pub fn consistent_with(&self, index: usize, names: &[&str]) -> Result<Vec<usize>> {
        let fixed = self.decode(index)?;
        let pinned: Vec<bool> = self.params.iter().map(|p| names.contains(&p.name.as_str())).collect();
        Ok((0..self.size())
            .filter(|&i| {
                let bins = self.decode(i).expect("in range");
                bins.iter().zip(&fixed).zip(&pinned).all(|((b, f), pin)| !pin || b == f)
            })
            .collect())
    }
}

pub fn build_action_space(specs: &[HyperparamSpec], defaults: &PGHyperparams) -> Result<HyperActionSpace> {
    if specs.is_empty() {
        return Err(Error::Hyperparam("at least one hyperparameter must be scheduled".into()));
    }
    let mut params: Vec<ResolvedParam> = Vec::with_capacity(specs.len());
    for spec in specs {
        if params.iter().any(|p| p.name == spec.name) {
            return Err(Error::Hyperparam(format!("{} scheduled twice", spec.name)));
        }
        let default = match spec.default {
            Some(v) => v,
            None => defaults.get(&spec.name)?,
        };
        let values = match spec.kind {
            BinKind::LrMultiplicative => {
                if !spec.values.is_empty() {
                    return Err(Error::Hyperparam("lr_multiplicative bins are derived, not listed".into()));
                }
                let b = spec
                    .bins
                    .ok_or_else(|| Error::Hyperparam(format!("{} needs a bin count", spec.name)))?;
                lr_bins(default, b)?
            }
            BinKind::UniformBins => {
                if spec.values.is_empty() {
                    return Err(Error::Hyperparam(format!("{} lists no bins", spec.name)));
                }
                if spec.bins.is_some_and(|b| b != spec.values.len()) {
                    return Err(Error::Hyperparam(format!("{} bin count disagrees with its values", spec.name)));
                }
                spec.values.clone()
            }
        };
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Hyperparam(format!("{} has a non-finite bin", spec.name)));
            }
            if values[..i].contains(v) {
                return Err(Error::Hyperparam(format!("{} has duplicate bin {v}", spec.name)));
            }
        }
        if !values.contains(&default) {
            return Err(Error::Hyperparam(format!(
                "default {default} of {} is not one of its bins",
                spec.name
            )));
        }
        let mut probe = defaults.clone();
        for v in &values {
            probe.set(&spec.name, *v)?;
        }
        params.push(ResolvedParam {
            name: spec.name.clone(),
            default,
            values,
        });
    }
    let space = HyperActionSpace { params };
    if space.size() > 1 << 20 {
        return Err(Error::Hyperparam(format!("{} hyper-actions is too many", space.size())));
    }
    Ok(space)
}

/// The last `N_order` weight gradients, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHistory {
    capacity: usize,
    items: VecDeque<Vec<Matrix>>,
}

impl GradHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, grads: Vec<Matrix>) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_back();
        }
        self.items.push_front(grads);
    }

    /// `i = 0` is the newest.
    pub fn get(&self, i: usize) -> Option<&[Matrix]> {
        self.items.get(i).map(Vec::as_slice)
    }
}

/// Tensor shapes of a raw hyper-state for `nets` with `n_order` gradients.
pub fn hyper_state_shapes(nets: &PolicyValueNet, n_order: usize) -> Vec<(usize, usize)> {
    let layer: Vec<(usize, usize)> = nets.weight_tensors().iter().map(|m| (m.rows(), m.cols())).collect();
    (0..=n_order).flat_map(|_| layer.iter().copied()).collect()
}

/// Parameters followed by the `n_order` newest gradients, zero-filled
/// where the history is still short.
pub fn capture_raw_state(nets: &PolicyValueNet, history: &GradHistory, n_order: usize) -> Result<RawHyperState> {
    let params: Vec<Matrix> = nets.weight_tensors().into_iter().cloned().collect();
    let mut tensors = Vec::with_capacity(params.len() * (n_order + 1));
    for n in 0..n_order {
        if let Some(g) = history.get(n) {
            if g.len() != params.len() || g.iter().zip(&params).any(|(a, b)| a.rows() != b.rows() || a.cols() != b.cols())
            {
                return Err(Error::mismatch(params.len(), g.len(), "gradient history shapes"));
            }
        }
    }
    tensors.extend(params.iter().cloned());
    for n in 0..n_order {
        match history.get(n) {
            Some(g) => tensors.extend(g.iter().cloned()),
            None => tensors.extend(params.iter().map(|p| Matrix::zeros(p.rows(), p.cols()))),
        }
    }
    Ok(RawHyperState { tensors })
}

/// Transitions of one learning episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeBuffer {
    pub keys: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    pub failed: Vec<bool>,
}

impl EpisodeBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, key: Vec<f64>, action: usize, failed: bool) {
        self.keys.push(key);
        self.actions.push(action);
        self.rewards.push(0.0);
        self.returns.push(0.0);
        self.failed.push(failed);
    }
}

/// Zero reward everywhere but the last step, which gets `g`; every
/// hyper-return is `g`. A failed final update keeps reward zero.
pub fn assign_hyper_rewards(buffer: &mut EpisodeBuffer, g: f64, u: usize) -> Result<()> {
    if buffer.len() != u || u == 0 {
        return Err(Error::mismatch(u, buffer.len(), "episode buffer length"));
    }
    buffer.rewards.iter_mut().for_each(|r| *r = 0.0);
    let last = u - 1;
    buffer.rewards[last] = if buffer.failed[last] { 0.0 } else { g };
    buffer.returns.iter_mut().for_each(|r| *r = g);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Fixed,
    Rnd,
    Epgt,
}

/// Memory-guided ε-greedy hyper-action selection.
#[derive(Debug, Clone)]
pub struct EpgtScheduler {
    pub memory: EpisodicMemory,
    pub encoder: Encoder,
    greedy_rng: StreamRng,
    total_steps: u64,
    n_order: usize,
    pending: Vec<(Vec<f64>, usize, f64)>,
    flush_every: u64,
    last_encoder_loss: Option<f64>,
}

impl EpgtScheduler {
    pub fn new(
        memory: EpisodicMemory,
        encoder: Encoder,
        greedy_rng: StreamRng,
        total_steps: u64,
        flush_every: u64,
    ) -> Result<Self> {
        if memory.config().key_dim != encoder.key_dim() {
            return Err(Error::mismatch(encoder.key_dim(), memory.config().key_dim, "memory key dim"));
        }
        if total_steps == 0 || flush_every == 0 {
            return Err(Error::Config("EPGT needs positive total steps and flush cadence".into()));
        }
        let n_order = encoder.config().n_order;
        Ok(Self {
            memory,
            encoder,
            greedy_rng,
            total_steps,
            n_order,
            pending: Vec::new(),
            flush_every,
            last_encoder_loss: None,
        })
    }

    pub fn pending_writes(&self) -> usize {
        self.pending.len()
    }

    pub fn flush(&mut self) -> Result<()> {
        let writes = std::mem::take(&mut self.pending);
        self.memory.update(writes.iter().map(|(k, a, g)| (k.as_slice(), *a, *g)))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Scheduler {
    Fixed { action: usize },
    Rnd { rng: StreamRng },
    Epgt(Box<EpgtScheduler>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub action: usize,
    pub key: Vec<f64>,
    pub epsilon: Option<f64>,
}

impl Scheduler {
    pub fn kind(&self) -> SchedulerKind {
        match self {
            Scheduler::Fixed { .. } => SchedulerKind::Fixed,
            Scheduler::Rnd { .. } => SchedulerKind::Rnd,
            Scheduler::Epgt(_) => SchedulerKind::Epgt,
        }
    }

    pub fn epgt(&self) -> Option<&EpgtScheduler> {
        match self {
            Scheduler::Epgt(s) => Some(s),
            _ => None,
        }
    }

    /// Picks among `allowed` (every action when `None`).
    pub fn choose(
        &mut self,
        space: &HyperActionSpace,
        nets: &PolicyValueNet,
        history: &GradHistory,
        allowed: Option<&[usize]>,
        update_step: u64,
    ) -> Result<Choice> {
        let all: Vec<usize>;
        let allowed = match allowed {
            Some(a) if !a.is_empty() => a,
            Some(_) => return Err(Error::Hyperparam("no hyper-action is allowed".into())),
            None => {
                all = (0..space.size()).collect();
                &all
            }
        };
        match self {
            Scheduler::Fixed { action } => {
                if !allowed.contains(action) {
                    return Err(Error::Hyperparam("fixed hyper-action is not allowed here".into()));
                }
                Ok(Choice {
                    action: *action,
                    key: Vec::new(),
                    epsilon: None,
                })
            }
            Scheduler::Rnd { rng } => Ok(Choice {
                action: allowed[rng.gen_range(0..allowed.len())],
                key: Vec::new(),
                epsilon: None,
            }),
            Scheduler::Epgt(s) => {
                let raw = capture_raw_state(nets, history, s.n_order)?;
                let key = s.encoder.embed(&raw)?;
                s.encoder.observe(raw);
                let epsilon = epsilon_schedule(update_step, s.total_steps)?;
                let memory = &s.memory;
                // Exploratory picks skip the memory read entirely.
                let pick = select_action_with(allowed.len(), epsilon, &mut s.greedy_rng, || {
                    allowed.iter().map(|&a| memory.read(&key, a).map(|r| r.value)).collect()
                })?;
                Ok(Choice {
                    action: allowed[pick],
                    key,
                    epsilon: Some(epsilon),
                })
            }
        }
    }

    /// Housekeeping after policy-update step `update_step` (1-based):
    /// encoder training and memory flushes on their cadences.
    fn after_update(&mut self, update_step: u64) -> Result<Option<f64>> {
        if let Scheduler::Epgt(s) = self {
            s.last_encoder_loss = s.encoder.maybe_train(update_step)?.map(|r| r.loss.reconstruction);
            if update_step % s.flush_every == 0 {
                s.flush()?;
            }
            return Ok(s.last_encoder_loss);
        }
        Ok(None)
    }

    fn end_episode(&mut self, buffer: &EpisodeBuffer) {
        if let Scheduler::Epgt(s) = self {
            for i in 0..buffer.len() {
                s.pending.push((buffer.keys[i].clone(), buffer.actions[i], buffer.returns[i]));
            }
        }
    }

    /// Writes anything still pending (end of training).
    pub fn finish(&mut self) -> Result<()> {
        if let Scheduler::Epgt(s) = self {
            s.flush()?;
        }
        Ok(())
    }
}

/// One record per policy-update step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub update_step: u64,
    pub learning_episode: u64,
    pub env_steps: u64,
    pub action: usize,
    pub hyperparams: BTreeMap<String, f64>,
    pub epsilon: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub episodes_completed: u64,
    pub trailing_mean_return: Option<f64>,
    /// Set on the last step of a learning episode.
    pub hyper_return: Option<f64>,
    pub encoder_loss: Option<f64>,
    pub memory_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveCriterion {
    pub window: usize,
    pub threshold: f64,
}

impl Default for SolveCriterion {
    fn default() -> Self {
        Self {
            window: 100,
            threshold: 195.0,
        }
    }
}

/// What the environment phase reports as the hyper-return G.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum HyperReturn {
    /// Discounted reward sum of the environment-phase rollout.
    DiscountedRollout,
    /// Mean undiscounted return of the last `window` finished episodes
    /// (0 before any episode finishes).
    RecentEpisodes { window: usize },
}

impl Default for HyperReturn {
    fn default() -> Self {
        HyperReturn::RecentEpisodes { window: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub algo: PgAlgorithm,
    pub env: EnvId,
    pub hp: PGHyperparams,
    pub hidden: Vec<usize>,
    /// Policy updates per learning episode (A2C only; PPO derives it).
    pub u: usize,
    pub seed: u64,
    pub solve: SolveCriterion,
    pub hyper_return: HyperReturn,
}

/// Hyperparameters a PPO learning episode fixes at its first step.
pub const PPO_EPISODE_LEVEL: [&str; 2] = ["batch_size", "gae_lambda"];

/// The PG learner plus the bookkeeping the outer loop needs.
#[derive(Debug, Clone)]
pub struct Learner {
    config: LearnerConfig,
    pub nets: PolicyValueNet,
    pub opt: PgOptimizer,
    runner: EnvRunner,
    history: GradHistory,
    pending: Option<Rollout>,
    policy_rng: StreamRng,
    minibatch_rng: StreamRng,
    update_step: u64,
    learning_episode: u64,
    window: VecDeque<f64>,
    recent: VecDeque<f64>,
    episodes_completed: u64,
    solved_at: Option<u64>,
}

impl Learner {
    pub fn new(config: LearnerConfig, n_order: usize) -> Result<Self> {
        config.hp.validate(config.algo)?;
        if config.u == 0 {
            return Err(Error::Config("U must be positive".into()));
        }
        if matches!(config.hyper_return, HyperReturn::RecentEpisodes { window: 0 }) {
            return Err(Error::Config("hyper-return window must be positive".into()));
        }
        if config.solve.window == 0 {
            return Err(Error::Config("solve window must be positive".into()));
        }
        let mut init = stream(config.seed, Stream::Init);
        let nets = PolicyValueNet::for_env(config.env, &config.hidden, &mut init)?;
        let opt = PgOptimizer::for_algorithm(config.algo, &nets);
        let runner = EnvRunner::new(
            config.env,
            config.hp.num_workers,
            crate::rng::derive_seed(config.seed, Stream::Env),
        );
        Ok(Self {
            nets,
            opt,
            runner,
            history: GradHistory::new(n_order),
            pending: None,
            policy_rng: stream(config.seed, Stream::Policy),
            minibatch_rng: stream(config.seed, Stream::Minibatch),
            update_step: 0,
            learning_episode: 0,
            window: VecDeque::with_capacity(config.solve.window),
            recent: VecDeque::new(),
            episodes_completed: 0,
            solved_at: None,
            config,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn env_steps(&self) -> u64 {
        self.runner.total_steps()
    }

    pub fn update_steps(&self) -> u64 {
        self.update_step
    }

    pub fn learning_episodes(&self) -> u64 {
        self.learning_episode
    }

    pub fn episodes_completed(&self) -> u64 {
        self.episodes_completed
    }

    pub fn solved_at(&self) -> Option<u64> {
        self.solved_at
    }

    pub fn history(&self) -> &GradHistory {
        &self.history
    }

    /// Mean return over the trailing window (may be partially filled).
    pub fn trailing_mean(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }

    /// Policy updates one learning episode performs with default values.
    pub fn default_steps_per_episode(&self) -> usize {
        match self.config.algo {
            PgAlgorithm::A2c => self.config.u,
            PgAlgorithm::Ppo => ppo_update_count(
                self.config.hp.horizon * self.config.hp.num_workers,
                self.config.hp.ppo_epochs,
                self.config.hp.batch_size,
            ),
        }
    }

    /// Planned policy-update count for an env-step budget.
    pub fn planned_updates(&self, total_env_steps: u64) -> u64 {
        let per_rollout = (self.config.hp.horizon * self.config.hp.num_workers) as u64;
        let rollouts = (total_env_steps / per_rollout).max(1);
        match self.config.algo {
            PgAlgorithm::A2c => rollouts,
            PgAlgorithm::Ppo => rollouts * self.default_steps_per_episode() as u64,
        }
    }

    fn collect(&mut self) -> Result<Rollout> {
        let ro = collect_rollout(&mut self.runner, &self.nets, self.config.hp.horizon, &mut self.policy_rng)?;
        for &(step, ret) in &ro.finished_episodes {
            self.episodes_completed += 1;
            if self.window.len() == self.config.solve.window {
                self.window.pop_front();
            }
            self.window.push_back(ret);
            if let HyperReturn::RecentEpisodes { window } = self.config.hyper_return {
                if self.recent.len() == window {
                    self.recent.pop_front();
                }
                self.recent.push_back(ret);
            }
            if self.solved_at.is_none()
                && self.window.len() == self.config.solve.window
                && self.trailing_mean().expect("non-empty") >= self.config.solve.threshold
            {
                self.solved_at = Some(step);
            }
        }
        Ok(ro)
    }

    fn take_rollout(&mut self) -> Result<Rollout> {
        match self.pending.take() {
            Some(ro) => Ok(ro),
            None => self.collect(),
        }
    }

    fn record(
        &self,
        space: &HyperActionSpace,
        choice: &Choice,
        stats: &UpdateStats,
        encoder_loss: Option<f64>,
        scheduler: &Scheduler,
    ) -> Result<StepRecord> {
        Ok(StepRecord {
            update_step: self.update_step,
            learning_episode: self.learning_episode,
            env_steps: self.env_steps(),
            action: choice.action,
            hyperparams: space.describe(choice.action)?,
            epsilon: choice.epsilon,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            grad_norm: stats.grad_norm,
            skipped: stats.skipped,
            episodes_completed: self.episodes_completed,
            trailing_mean_return: self.trailing_mean(),
            hyper_return: None,
            encoder_loss,
            memory_size: scheduler.epgt().map(|s| s.memory.len()),
            wall_clock_ms: None,
        })
    }

    fn finish_step(&mut self, grads: &PgGradients, stats: &UpdateStats) {
        self.update_step += 1;
        if !stats.skipped {
            self.history.push(grads.weight_tensors());
        }
    }

    /// Runs one learning episode, handing each step's record to `sink`.
    /// Returns the episode's hyper-return G and the filled buffer.
    pub fn run_learning_episode(
        &mut self,
        space: &HyperActionSpace,
        scheduler: &mut Scheduler,
        sink: &mut dyn FnMut(StepRecord) -> Result<()>,
    ) -> Result<(f64, EpisodeBuffer)> {
        let mut buffer = EpisodeBuffer::default();
        let mut records = Vec::new();
        match self.config.algo {
            PgAlgorithm::A2c => {
                for _ in 0..self.config.u {
                    let rollout = self.take_rollout()?;
                    let choice = scheduler.choose(space, &self.nets, &self.history, None, self.update_step)?;
                    let hp = space.apply(choice.action, &self.config.hp)?;
                    let adv = compute_gae(&rollout, hp.discount, hp.gae_lambda);
                    let (stats, grads) = a2c_update(&mut self.nets, &rollout, &adv, &hp, &mut self.opt)?;
                    self.finish_step(&grads, &stats);
                    let enc = scheduler.after_update(self.update_step)?;
                    buffer.push(choice.key.clone(), choice.action, stats.skipped);
                    records.push(self.record(space, &choice, &stats, enc, scheduler)?);
                }
            }
            PgAlgorithm::Ppo => {
                let rollout = self.take_rollout()?;
                let first = scheduler.choose(space, &self.nets, &self.history, None, self.update_step)?;
                let episode_hp = space.apply(first.action, &self.config.hp)?;
                let mut adv = compute_gae(&rollout, episode_hp.discount, episode_hp.gae_lambda);
                normalize_advantages(&mut adv.advantages);
                let phase = PpoPhase::new(
                    rollout.len(),
                    episode_hp.ppo_epochs,
                    episode_hp.batch_size,
                    &mut self.minibatch_rng,
                )?;
                let allowed = space.consistent_with(first.action, &PPO_EPISODE_LEVEL)?;
                let mut choice = first;
                for i in 0..phase.len() {
                    if i > 0 {
                        choice = scheduler.choose(space, &self.nets, &self.history, Some(&allowed), self.update_step)?;
                    }
                    let hp = space.apply(choice.action, &self.config.hp)?;
                    let (stats, grads) = phase.step(i, &mut self.nets, &rollout, &adv, &hp, &mut self.opt)?;
                    self.finish_step(&grads, &stats);
                    let enc = scheduler.after_update(self.update_step)?;
                    buffer.push(choice.key.clone(), choice.action, stats.skipped);
                    records.push(self.record(space, &choice, &stats, enc, scheduler)?);
                }
            }
        }
        let eval = self.collect()?;
        let g = match self.config.hyper_return {
            HyperReturn::DiscountedRollout => eval.empirical_return(self.config.hp.discount),
            HyperReturn::RecentEpisodes { .. } if self.recent.is_empty() => 0.0,
            HyperReturn::RecentEpisodes { .. } => self.recent.iter().sum::<f64>() / self.recent.len() as f64,
        };
        self.pending = Some(eval);
        let u = buffer.len();
        assign_hyper_rewards(&mut buffer, g, u)?;
        scheduler.end_episode(&buffer);
        if let Some(last) = records.last_mut() {
            last.hyper_return = Some(g);
            last.env_steps = self.env_steps();
            last.episodes_completed = self.episodes_completed;
            last.trailing_mean_return = self.trailing_mean();
        }
        for r in records {
            sink(r)?;
        }
        self.learning_episode += 1;
        Ok((g, buffer))
    }
}

/// Builds the scheduler for a learner. `total_updates` drives the ε
/// schedule; the memory capacity defaults to half of it.
pub fn build_scheduler(
    kind: SchedulerKind,
    space: &HyperActionSpace,
    learner: &Learner,
    encoder_cfg: &EncoderConfig,
    memory_cfg: Option<MemoryConfig>,
    total_updates: u64,
    seed: u64,
) -> Result<Scheduler> {
    Ok(match kind {
        SchedulerKind::Fixed => Scheduler::Fixed {
            action: space.default_index(),
        },
        SchedulerKind::Rnd => Scheduler::Rnd {
            rng: stream(seed, Stream::Scheduler),
        },
        SchedulerKind::Epgt => {
            let shapes = hyper_state_shapes(&learner.nets, encoder_cfg.n_order);
            let encoder = Encoder::new(encoder_cfg.clone(), &shapes, stream(seed, Stream::Encoder))?;
            let mem_cfg = memory_cfg.unwrap_or_else(|| {
                MemoryConfig::new(encoder.key_dim(), space.size(), (total_updates / 2).max(1) as usize)
            });
            if mem_cfg.num_actions != space.size() || mem_cfg.key_dim != encoder.key_dim() {
                return Err(Error::Config("memory shape does not match the action space or key size".into()));
            }
            let memory = EpisodicMemory::new(mem_cfg)?;
            Scheduler::Epgt(Box::new(EpgtScheduler::new(
                memory,
                encoder,
                stream(seed, Stream::Greedy),
                total_updates,
                10,
            )?))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_bins_examples() {
        let b = lr_bins(7e-4, 5).unwrap();
        let expected = [7e-4 / 3.0, 3.5e-4, 7e-4, 1.4e-3, 2.1e-3];
        assert_eq!(b.len(), 5);
        for (x, y) in b.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(lr_bins(1.0, 1).unwrap(), vec![1.0]);
        assert_eq!(lr_bins(1.0, 15).unwrap().len(), 15);
        assert!(lr_bins(1.0, 4).is_err());
    }

    #[test]
    fn mixed_radix_round_trip() {
        let specs = [
            HyperparamSpec::uniform("gae_lambda", &[0.9, 0.95, 0.99]),
            HyperparamSpec::uniform("value_coef", &[0.25, 0.5, 0.75, 1.0]),
        ];
        let space = build_action_space(&specs, &PGHyperparams::a2c_defaults()).unwrap();
        assert_eq!(space.size(), 12);
        for i in 0..12 {
            assert_eq!(space.encode(&space.decode(i).unwrap()).unwrap(), i);
        }
        assert_eq!(space.values(space.default_index()).unwrap(), vec![0.95, 0.5]);
    }

    #[test]
    fn action_space_errors() {
        let d = PGHyperparams::a2c_defaults();
        assert!(build_action_space(&[HyperparamSpec::uniform("gae_lambda", &[0.9, 0.9, 0.95])], &d).is_err());
        assert!(build_action_space(&[HyperparamSpec::uniform("gae_lambda", &[0.9, 0.99])], &d).is_err());
        assert!(build_action_space(&[HyperparamSpec::learning_rate(4)], &d).is_err());
        assert!(build_action_space(&[], &d).is_err());
    }

    #[test]
    fn rewards_are_sparse() {
        let mut buf = EpisodeBuffer::default();
        for a in 0..10 {
            buf.push(Vec::new(), a, false);
        }
        assign_hyper_rewards(&mut buf, 3.2, 10).unwrap();
        assert_eq!(&buf.rewards[..9], &[0.0; 9]);
        assert_eq!(buf.rewards[9], 3.2);
        assert!(buf.returns.iter().all(|r| *r == 3.2));
        assert!(assign_hyper_rewards(&mut buf, 1.0, 9).is_err());
    }

    #[test]
    fn history_is_newest_first_and_bounded() {
        let mut h = GradHistory::new(2);
        for v in 1..=3 {
            h.push(vec![Matrix::from_vec(1, 1, vec![v as f64]).unwrap()]);
        }
        assert_eq!(h.len(), 2);
        assert_eq!(h.get(0).unwrap()[0].get(0, 0), 3.0);
        assert_eq!(h.get(1).unwrap()[0].get(0, 0), 2.0);
    }

    #[test]
    fn ppo_consistent_actions_pin_episode_level_bins() {
        let specs = [
            HyperparamSpec::uniform("batch_size", &[32.0, 64.0]),
            HyperparamSpec::learning_rate(3),
        ];
        let space = build_action_space(&specs, &PGHyperparams::ppo_defaults()).unwrap();
        let allowed = space.consistent_with(space.encode(&[1, 0]).unwrap(), &PPO_EPISODE_LEVEL).unwrap();
        assert_eq!(allowed, vec![3, 4, 5]);
    }
}
