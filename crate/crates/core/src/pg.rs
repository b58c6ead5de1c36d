//! Policy-gradient learners: rollouts, GAE, A2C and PPO.
//!
//! The hyperparameters in [`PGHyperparams`] are the knobs the outer
//! scheduler turns. Every update returns the objective's gradients so the
//! caller can keep a gradient history for hyper-state capture.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace, EnvId, EnvInstance};
use crate::nn::{Activation, DenseNet, ForwardCache, GradientSet, Matrix, OptimizerKind, OptimizerState};
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Hidden widths used when a config does not set them.
pub const DEFAULT_HIDDEN: [usize; 1] = [64];
pub const POLICY_HEAD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgAlgorithm {
    A2c,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PGHyperparams {
    pub learning_rate: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub discount: f64,
    pub horizon: usize,
    pub ppo_epochs: usize,
    pub num_workers: usize,
    pub max_grad_norm: f64,
}

impl Default for PGHyperparams {
    fn default() -> Self {
        Self::a2c_defaults()
    }
}

impl PGHyperparams {
    pub fn a2c_defaults() -> Self {
        Self {
            learning_rate: 7e-4,
            gae_lambda: 0.95,
            clip: 0.2,
            batch_size: 64,
            value_coef: 0.5,
            entropy_coef: 0.01,
            discount: 0.99,
            horizon: 5,
            ppo_epochs: 10,
            num_workers: 1,
            max_grad_norm: 0.5,
        }
    }

    pub fn ppo_defaults() -> Self {
        Self {
            learning_rate: 3e-4,
            gae_lambda: 0.95,
            clip: 0.2,
            batch_size: 64,
            value_coef: 0.5,
            entropy_coef: 0.0,
            discount: 0.99,
            horizon: 2048,
            ppo_epochs: 10,
            num_workers: 1,
            max_grad_norm: 0.5,
        }
    }

    pub fn defaults_for(algo: PgAlgorithm) -> Self {
        match algo {
            PgAlgorithm::A2c => Self::a2c_defaults(),
            PgAlgorithm::Ppo => Self::ppo_defaults(),
        }
    }

    /// Names accepted by [`PGHyperparams::set`].
    pub const SCHEDULABLE: [&'static str; 6] = [
        "learning_rate",
        "gae_lambda",
        "clip",
        "batch_size",
        "value_coef",
        "entropy_coef",
    ];

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "learning_rate" => self.learning_rate,
            "gae_lambda" => self.gae_lambda,
            "clip" => self.clip,
            "batch_size" => self.batch_size as f64,
            "value_coef" => self.value_coef,
            "entropy_coef" => self.entropy_coef,
            other => return Err(Error::Hyperparam(format!("unknown hyperparameter {other:?}"))),
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "learning_rate" => self.learning_rate = value,
            "gae_lambda" => self.gae_lambda = value,
            "clip" => self.clip = value,
            "batch_size" => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Hyperparam(format!("batch size {value} is not a positive integer")));
                }
                self.batch_size = value as usize
            }
            "value_coef" => self.value_coef = value,
            "entropy_coef" => self.entropy_coef = value,
            other => return Err(Error::Hyperparam(format!("unknown hyperparameter {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self, algo: PgAlgorithm) -> Result<()> {
        let bad = |what: &str| Err(Error::Hyperparam(what.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in (0, 1]");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        if self.horizon == 0 || self.num_workers == 0 || self.ppo_epochs == 0 {
            return bad("horizon, num_workers and ppo_epochs must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if algo == PgAlgorithm::Ppo {
            if !(self.clip > 0.0 && self.clip < 1.0) {
                return bad("clip must lie in (0, 1)");
            }
            if self.batch_size == 0 || self.batch_size > self.horizon * self.num_workers {
                return bad("batch_size must lie in [1, horizon * num_workers]");
            }
        }
        Ok(())
    }
}

/// Gradient steps in one PPO update: `epochs · ceil(samples / b)`.
pub fn ppo_update_count(samples: usize, epochs: usize, batch_size: usize) -> usize {
    epochs * samples.div_ceil(batch_size)
}

/// Policy head plus value head, kept as separate networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueNet {
    pub policy: DenseNet,
    pub value: DenseNet,
    /// State-independent log standard deviation (continuous actions only).
    pub log_std: Option<Vec<f64>>,
    action_space: ActionSpace,
}

/// Per-sample policy quantities and their derivatives with respect to the
/// policy head output and the log-std parameters.
struct PolicyTerms {
    log_prob: f64,
    entropy: f64,
    dlogp_head: Vec<f64>,
    dent_head: Vec<f64>,
    dlogp_logstd: Vec<f64>,
    dent_logstd: Vec<f64>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl PolicyValueNet {
    /// `hidden` lists the tanh hidden widths shared by both heads.
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_space: ActionSpace,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let build = |out: usize, rng: &mut R| {
            let mut sizes = vec![obs_dim];
            sizes.extend_from_slice(hidden);
            sizes.push(out);
            let mut acts = vec![Activation::Tanh; hidden.len()];
            acts.push(Activation::Identity);
            DenseNet::with_rng(&sizes, &acts, rng)
        };
        let mut policy = build(action_space.head_dim(), rng)?;
        // Near-uniform initial policy.
        if let Some(head) = policy.layers_mut().last_mut() {
            head.weights_mut().scale(POLICY_HEAD_INIT_SCALE);
        }
        let value = build(1, rng)?;
        let log_std = match action_space {
            ActionSpace::Continuous { dim, .. } => Some(vec![0.0; dim]),
            ActionSpace::Discrete(_) => None,
        };
        Ok(Self {
            policy,
            value,
            log_std,
            action_space,
        })
    }

    pub fn for_env<R: Rng + ?Sized>(env: EnvId, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Self::new(env.observation_dim(), env.action_space(), hidden, rng)
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    /// Weight matrices of every layer, policy first then value.
    pub fn weight_tensors(&self) -> Vec<&Matrix> {
        self.policy.weight_matrices().chain(self.value.weight_matrices()).collect()
    }

    pub fn value_of(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.value.predict(obs)?[0])
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite()
            && self.value.is_finite()
            && self.log_std.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Samples an action; returns it with its log-probability and the
    /// state value.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(Action, f64, f64)> {
        let head = self.policy.predict(obs)?;
        let value = self.value_of(obs)?;
        let action = match self.action_space {
            ActionSpace::Discrete(n) => {
                let logp = log_softmax(&head);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (i, lp) in logp.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                Action::Discrete(chosen)
            }
            ActionSpace::Continuous { .. } => {
                let log_std = self.log_std.as_ref().expect("continuous policy has log-std");
                Action::Continuous(
                    head.iter()
                        .zip(log_std)
                        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
        };
        let log_prob = self.terms(&head, &action)?.log_prob;
        Ok((action, log_prob, value))
    }

    /// Most likely action (argmax or the Gaussian mean).
    pub fn greedy_action(&self, obs: &[f64]) -> Result<Action> {
        let head = self.policy.predict(obs)?;
        Ok(match self.action_space {
            ActionSpace::Discrete(_) => {
                let mut best = 0;
                for (i, v) in head.iter().enumerate() {
                    if *v > head[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
            ActionSpace::Continuous { .. } => Action::Continuous(head),
        })
    }

    pub fn log_prob(&self, obs: &[f64], action: &Action) -> Result<f64> {
        let head = self.policy.predict(obs)?;
        Ok(self.terms(&head, action)?.log_prob)
    }

    fn terms(&self, head: &[f64], action: &Action) -> Result<PolicyTerms> {
        match (self.action_space, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) => {
                if *a >= n {
                    return Err(Error::Env(format!("action {a} outside {n} choices")));
                }
                let logp = log_softmax(head);
                let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                let entropy = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
                let dlogp_head = (0..n).map(|j| if j == *a { 1.0 } else { 0.0 } - p[j]).collect();
                let dent_head = (0..n).map(|j| -p[j] * (logp[j] + entropy)).collect();
                Ok(PolicyTerms {
                    log_prob: logp[*a],
                    entropy,
                    dlogp_head,
                    dent_head,
                    dlogp_logstd: Vec::new(),
                    dent_logstd: Vec::new(),
                })
            }
            (ActionSpace::Continuous { dim, .. }, Action::Continuous(a)) => {
                if a.len() != dim {
                    return Err(Error::mismatch(dim, a.len(), "continuous action"));
                }
                let log_std = self.log_std.as_ref().expect("continuous policy has log-std");
                let mut log_prob = 0.0;
                let mut entropy = 0.0;
                let mut dlogp_head = Vec::with_capacity(dim);
                let mut dlogp_logstd = Vec::with_capacity(dim);
                for i in 0..dim {
                    let std = log_std[i].exp();
                    let z = (a[i] - head[i]) / std;
                    log_prob += -0.5 * z * z - log_std[i] - HALF_LN_2PI;
                    entropy += 0.5 + HALF_LN_2PI + log_std[i];
                    dlogp_head.push(z / std);
                    dlogp_logstd.push(z * z - 1.0);
                }
                Ok(PolicyTerms {
                    log_prob,
                    entropy,
                    dlogp_head,
                    dent_head: vec![0.0; dim],
                    dlogp_logstd,
                    dent_logstd: vec![1.0; dim],
                })
            }
            _ => Err(Error::Env("action kind does not match the policy".into())),
        }
    }
}

/// Optimizer state for each parameter group of a [`PolicyValueNet`].
#[derive(Debug, Clone)]
pub struct PgOptimizer {
    pub policy: OptimizerState,
    pub value: OptimizerState,
    pub log_std: Option<OptimizerState>,
}

impl PgOptimizer {
    pub fn new(kind: OptimizerKind, nets: &PolicyValueNet) -> Self {
        Self {
            policy: OptimizerState::for_net(kind, &nets.policy),
            value: OptimizerState::for_net(kind, &nets.value),
            log_std: nets.log_std.as_ref().map(|v| OptimizerState::new(kind, &[v.len()])),
        }
    }

    pub fn for_algorithm(algo: PgAlgorithm, nets: &PolicyValueNet) -> Self {
        let kind = match algo {
            PgAlgorithm::A2c => OptimizerKind::rmsprop(),
            PgAlgorithm::Ppo => OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-5,
            },
        };
        Self::new(kind, nets)
    }
}

/// Workers × horizon transitions stored worker-major: index `w * T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub horizon: usize,
    pub workers: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub dones: Vec<bool>,
    pub truncated: Vec<bool>,
    /// Value of the final observation at truncated steps, zero elsewhere.
    pub truncation_values: Vec<f64>,
    /// Value of the state after the last step, per worker.
    pub bootstrap_values: Vec<f64>,
    /// Episodes finished during this rollout: (env step at completion, undiscounted return).
    pub finished_episodes: Vec<(u64, f64)>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Empirical return G: discounted reward sum over each worker's
    /// segment, averaged over workers. No bootstrap.
    pub fn empirical_return(&self, discount: f64) -> f64 {
        let mut total = 0.0;
        for w in 0..self.workers {
            let seg = &self.rewards[w * self.horizon..(w + 1) * self.horizon];
            let mut g = 0.0;
            let mut scale = 1.0;
            for r in seg {
                g += scale * r;
                scale *= discount;
            }
            total += g;
        }
        total / self.workers as f64
    }

    fn validate(&self) -> Result<()> {
        let n = self.horizon * self.workers;
        let lens = [
            self.observations.len(),
            self.actions.len(),
            self.rewards.len(),
            self.values.len(),
            self.log_probs.len(),
            self.dones.len(),
            self.truncated.len(),
            self.truncation_values.len(),
        ];
        if let Some(&bad) = lens.iter().find(|&&l| l != n) {
            return Err(Error::mismatch(n, bad, "rollout field length"));
        }
        if self.bootstrap_values.len() != self.workers {
            return Err(Error::mismatch(self.workers, self.bootstrap_values.len(), "bootstrap values"));
        }
        if self.log_probs.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("rollout log-probabilities"));
        }
        Ok(())
    }
}

/// Environments plus their in-progress episode bookkeeping.
#[derive(Debug, Clone)]
pub struct EnvRunner {
    envs: Vec<EnvInstance>,
    obs: Vec<Vec<f64>>,
    running_returns: Vec<f64>,
    total_steps: u64,
}

impl EnvRunner {
    pub fn new(id: EnvId, workers: usize, seed: u64) -> Self {
        let mut envs = Vec::with_capacity(workers);
        let mut obs = Vec::with_capacity(workers);
        for w in 0..workers {
            let mut env = EnvInstance::new(id, seed.wrapping_add(w as u64));
            obs.push(env.reset_with_seed(seed.wrapping_add(w as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            envs.push(env);
        }
        Self {
            envs,
            obs,
            running_returns: vec![0.0; workers],
            total_steps: 0,
        }
    }

    pub fn from_env(env: EnvInstance) -> Self {
        let mut env = env;
        let obs = env.reset();
        Self {
            envs: vec![env],
            obs: vec![obs],
            running_returns: vec![0.0],
            total_steps: 0,
        }
    }

    pub fn workers(&self) -> usize {
        self.envs.len()
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn env_id(&self) -> EnvId {
        self.envs[0].id()
    }
}

/// Samples `horizon` transitions per worker from the current policy,
/// auto-resetting finished episodes.
pub fn collect_rollout<R: Rng + ?Sized>(
    runner: &mut EnvRunner,
    nets: &PolicyValueNet,
    horizon: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be positive".into()));
    }
    let workers = runner.workers();
    let n = horizon * workers;
    let mut ro = Rollout {
        horizon,
        workers,
        observations: vec![Vec::new(); n],
        actions: vec![Action::Discrete(0); n],
        rewards: vec![0.0; n],
        values: vec![0.0; n],
        log_probs: vec![0.0; n],
        dones: vec![false; n],
        truncated: vec![false; n],
        truncation_values: vec![0.0; n],
        bootstrap_values: vec![0.0; workers],
        finished_episodes: Vec::new(),
    };
    for t in 0..horizon {
        for w in 0..workers {
            let i = w * horizon + t;
            let obs = std::mem::take(&mut runner.obs[w]);
            let (action, log_prob, value) = nets.act(&obs, rng)?;
            let step = runner.envs[w].step(&action)?;
            runner.total_steps += 1;
            runner.running_returns[w] += step.reward;
            ro.rewards[i] = step.reward;
            ro.values[i] = value;
            ro.log_probs[i] = log_prob;
            ro.dones[i] = step.done;
            ro.truncated[i] = step.truncated;
            if step.truncated {
                ro.truncation_values[i] = nets.value_of(&step.observation)?;
            }
            ro.observations[i] = obs;
            ro.actions[i] = action;
            runner.obs[w] = if step.done || step.truncated {
                ro.finished_episodes.push((runner.total_steps, runner.running_returns[w]));
                runner.running_returns[w] = 0.0;
                runner.envs[w].reset()
            } else {
                step.observation
            };
        }
    }
    for w in 0..workers {
        ro.bootstrap_values[w] = nets.value_of(&runner.obs[w])?;
    }
    Ok(ro)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Generalized advantage estimation, per worker segment.
///
/// `δ_t = r_t + γ V(s_{t+1}) (1 − done_t) − V(s_t)` and
/// `A_t = δ_t + γλ (1 − done_t) A_{t+1}`. A truncated step bootstraps from
/// the value of its final observation and does not propagate advantage
/// across the reset.
pub fn compute_gae(rollout: &Rollout, discount: f64, lambda: f64) -> Advantages {
    let (t_len, n) = (rollout.horizon, rollout.len());
    let mut advantages = vec![0.0; n];
    for w in 0..rollout.workers {
        let mut next_adv = 0.0;
        for t in (0..t_len).rev() {
            let i = w * t_len + t;
            let next_value = if rollout.truncated[i] {
                rollout.truncation_values[i]
            } else if t + 1 == t_len {
                rollout.bootstrap_values[w]
            } else {
                rollout.values[i + 1]
            };
            let live = if rollout.dones[i] { 0.0 } else { 1.0 };
            let carry = if rollout.dones[i] || rollout.truncated[i] { 0.0 } else { 1.0 };
            let delta = rollout.rewards[i] + discount * next_value * live - rollout.values[i];
            next_adv = delta + discount * lambda * carry * next_adv;
            advantages[i] = next_adv;
        }
    }
    let targets = advantages.iter().zip(&rollout.values).map(|(a, v)| a + v).collect();
    Advantages { advantages, targets }
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-12);
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    /// Set when the loss or gradients were non-finite; nothing was applied.
    pub skipped: bool,
}

/// Gradients of the PG objective (before norm clipping).
#[derive(Debug, Clone, PartialEq)]
pub struct PgGradients {
    pub policy: GradientSet,
    pub value: GradientSet,
    pub log_std: Option<Vec<f64>>,
}

impl PgGradients {
    fn zeros(nets: &PolicyValueNet) -> Self {
        Self {
            policy: GradientSet::zeros_like(&nets.policy),
            value: GradientSet::zeros_like(&nets.value),
            log_std: nets.log_std.as_ref().map(|v| vec![0.0; v.len()]),
        }
    }

    pub fn norm(&self) -> f64 {
        let ls = self.log_std.as_ref().map_or(0.0, |g| g.iter().map(|x| x * x).sum());
        (self.policy.norm_sq() + self.value.norm_sq() + ls).sqrt()
    }

    fn scale(&mut self, a: f64) {
        self.policy.scale(a);
        self.value.scale(a);
        if let Some(g) = &mut self.log_std {
            g.iter_mut().for_each(|x| *x *= a);
        }
    }

    fn is_finite(&self) -> bool {
        self.policy.is_finite()
            && self.value.is_finite()
            && self.log_std.as_ref().is_none_or(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Weight-matrix gradients in [`PolicyValueNet::weight_tensors`] order.
    pub fn weight_tensors(&self) -> Vec<Matrix> {
        let mut out = self.policy.weight_matrices();
        out.extend(self.value.weight_matrices());
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Surrogate {
    Vanilla,
    Clipped(f64),
}

/// Loss terms over `indices` and their exact gradients.
fn loss_and_gradients(
    nets: &PolicyValueNet,
    rollout: &Rollout,
    adv: &Advantages,
    indices: &[usize],
    value_coef: f64,
    entropy_coef: f64,
    surrogate: Surrogate,
) -> Result<(UpdateStats, PgGradients)> {
    let mut grads = PgGradients::zeros(nets);
    let mut stats = UpdateStats::default();
    let inv_n = 1.0 / indices.len() as f64;
    for &i in indices {
        let obs = &rollout.observations[i];
        let (head, pcache): (Vec<f64>, ForwardCache) = nets.policy.forward(obs)?;
        let (vout, vcache) = nets.value.forward(obs)?;
        let terms = nets.terms(&head, &rollout.actions[i])?;
        let a = adv.advantages[i];

        let (pl, dl_dlogp) = match surrogate {
            Surrogate::Vanilla => (-terms.log_prob * a, -a),
            Surrogate::Clipped(eps) => {
                let ratio = (terms.log_prob - rollout.log_probs[i]).exp();
                let unclipped = ratio * a;
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
                if unclipped <= clipped {
                    (-unclipped, -a * ratio)
                } else {
                    (-clipped, 0.0)
                }
            }
        };
        stats.policy_loss += pl * inv_n;
        stats.entropy += terms.entropy * inv_n;
        let verr = vout[0] - adv.targets[i];
        stats.value_loss += verr * verr * inv_n;

        let head_grad: Vec<f64> = terms
            .dlogp_head
            .iter()
            .zip(&terms.dent_head)
            .map(|(dl, de)| (dl_dlogp * dl - entropy_coef * de) * inv_n)
            .collect();
        nets.policy.backward_accumulate(&pcache, &head_grad, &mut grads.policy)?;
        nets.value
            .backward_accumulate(&vcache, &[2.0 * value_coef * verr * inv_n], &mut grads.value)?;
        if let Some(g) = &mut grads.log_std {
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += (dl_dlogp * terms.dlogp_logstd[j] - entropy_coef * terms.dent_logstd[j]) * inv_n;
            }
        }
    }
    stats.grad_norm = grads.norm();
    Ok((stats, grads))
}

/// Clips the global norm, then applies one optimizer step to every group.
fn apply_gradients(
    nets: &mut PolicyValueNet,
    grads: &PgGradients,
    hp: &PGHyperparams,
    opt: &mut PgOptimizer,
    stats: &mut UpdateStats,
) -> Result<()> {
    let loss = stats.policy_loss + hp.value_coef * stats.value_loss - hp.entropy_coef * stats.entropy;
    if !loss.is_finite() || !grads.is_finite() {
        stats.skipped = true;
        return Ok(());
    }
    let mut clipped = grads.clone();
    if stats.grad_norm > hp.max_grad_norm {
        clipped.scale(hp.max_grad_norm / (stats.grad_norm + 1e-6));
    }
    let lr = hp.learning_rate;
    let before = nets.clone();
    let result = (|| {
        nets.policy.apply_update(&clipped.policy, &mut opt.policy, lr)?;
        nets.value.apply_update(&clipped.value, &mut opt.value, lr)?;
        if let (Some(ls), Some(g), Some(o)) = (&mut nets.log_std, &clipped.log_std, &mut opt.log_std) {
            o.step(&mut [ls.as_mut_slice()], &[g.as_slice()], lr)?;
            for v in ls.iter_mut() {
                *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
        Ok::<_, Error>(())
    })();
    if result.is_err() || !nets.is_finite() {
        *nets = before;
        stats.skipped = true;
    }
    Ok(())
}

/// One A2C gradient step on
/// `−mean(log π · A) + l_v · mean((V − target)²) − c_e · mean(H)`.
pub fn a2c_update(
    nets: &mut PolicyValueNet,
    rollout: &Rollout,
    adv: &Advantages,
    hp: &PGHyperparams,
    opt: &mut PgOptimizer,
) -> Result<(UpdateStats, PgGradients)> {
    rollout.validate()?;
    if adv.advantages.len() != rollout.len() || adv.targets.len() != rollout.len() {
        return Err(Error::mismatch(rollout.len(), adv.advantages.len(), "advantages"));
    }
    let indices: Vec<usize> = (0..rollout.len()).collect();
    let (mut stats, grads) =
        loss_and_gradients(nets, rollout, adv, &indices, hp.value_coef, hp.entropy_coef, Surrogate::Vanilla)?;
    apply_gradients(nets, &grads, hp, opt, &mut stats)?;
    Ok((stats, grads))
}

/// The shuffled minibatch schedule of one PPO update. Each entry is one
/// gradient step, so `len()` is the update-step count U.
#[derive(Debug, Clone)]
pub struct PpoPhase {
    minibatches: Vec<Vec<usize>>,
}

impl PpoPhase {
    pub fn new<R: Rng + ?Sized>(samples: usize, epochs: usize, batch_size: usize, rng: &mut R) -> Result<Self> {
        if samples == 0 || epochs == 0 || batch_size == 0 {
            return Err(Error::Hyperparam("PPO phase needs samples, epochs and batch size".into()));
        }
        let mut minibatches = Vec::with_capacity(ppo_update_count(samples, epochs, batch_size));
        let mut order: Vec<usize> = (0..samples).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            minibatches.extend(order.chunks(batch_size).map(<[usize]>::to_vec));
        }
        Ok(Self { minibatches })
    }

    pub fn len(&self) -> usize {
        self.minibatches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minibatches.is_empty()
    }

    /// Gradient step `i` with the clipped surrogate. `hp` supplies the
    /// step's learning rate, clip and loss coefficients.
    pub fn step(
        &self,
        i: usize,
        nets: &mut PolicyValueNet,
        rollout: &Rollout,
        adv: &Advantages,
        hp: &PGHyperparams,
        opt: &mut PgOptimizer,
    ) -> Result<(UpdateStats, PgGradients)> {
        let batch = self
            .minibatches
            .get(i)
            .ok_or_else(|| Error::Config(format!("PPO step {i} beyond {} steps", self.len())))?;
        let (mut stats, grads) = loss_and_gradients(
            nets,
            rollout,
            adv,
            batch,
            hp.value_coef,
            hp.entropy_coef,
            Surrogate::Clipped(hp.clip),
        )?;
        apply_gradients(nets, &grads, hp, opt, &mut stats)?;
        Ok((stats, grads))
    }
}

/// Full PPO update with fixed hyperparameters. `adv` must already be
/// normalized. Returns mean statistics and the gradient-step count U.
pub fn ppo_update<R: Rng + ?Sized>(
    nets: &mut PolicyValueNet,
    rollout: &Rollout,
    adv: &Advantages,
    hp: &PGHyperparams,
    opt: &mut PgOptimizer,
    rng: &mut R,
) -> Result<(UpdateStats, usize)> {
    rollout.validate()?;
    let phase = PpoPhase::new(rollout.len(), hp.ppo_epochs, hp.batch_size, rng)?;
    let mut mean = UpdateStats::default();
    let k = phase.len() as f64;
    for i in 0..phase.len() {
        let (s, _) = phase.step(i, nets, rollout, adv, hp, opt)?;
        mean.policy_loss += s.policy_loss / k;
        mean.value_loss += s.value_loss / k;
        mean.entropy += s.entropy / k;
        mean.grad_norm += s.grad_norm / k;
        mean.skipped |= s.skipped;
    }
    Ok((mean, phase.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rollout_from(rewards: Vec<f64>, values: Vec<f64>, dones: Vec<bool>, bootstrap: f64) -> Rollout {
        let n = rewards.len();
        Rollout {
            horizon: n,
            workers: 1,
            observations: vec![vec![0.0]; n],
            actions: vec![Action::Discrete(0); n],
            rewards,
            values,
            log_probs: vec![0.0; n],
            dones,
            truncated: vec![false; n],
            truncation_values: vec![0.0; n],
            bootstrap_values: vec![bootstrap],
            finished_episodes: Vec::new(),
        }
    }

    #[test]
    fn gae_hand_recursion() {
        let ro = rollout_from(vec![1.0, 1.0], vec![0.5, 0.5], vec![false, false], 0.5);
        let adv = compute_gae(&ro, 0.5, 0.5);
        assert!((adv.advantages[0] - 0.9375).abs() < 1e-12);
        assert!((adv.advantages[1] - 0.75).abs() < 1e-12);
        assert!((adv.targets[0] - 1.4375).abs() < 1e-12);
    }

    #[test]
    fn gae_zero_discount_collapses() {
        let ro = rollout_from(vec![1.0, -2.0, 0.5], vec![0.3, 0.1, -0.4], vec![false, true, false], 9.0);
        let adv = compute_gae(&ro, 0.0, 0.95);
        for i in 0..3 {
            assert!((adv.advantages[i] - (ro.rewards[i] - ro.values[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_telescopes_with_unit_lambda() {
        let ro = rollout_from(vec![1.0, 2.0, 3.0], vec![0.2, -0.1, 0.7], vec![false; 3], 4.0);
        let adv = compute_gae(&ro, 1.0, 1.0);
        let tail = [10.0, 9.0, 7.0];
        for i in 0..3 {
            assert!((adv.advantages[i] - (tail[i] - ro.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_truncation_bootstraps_from_final_observation() {
        let mut ro = rollout_from(vec![1.0, 1.0], vec![0.0, 0.0], vec![false, false], 0.0);
        ro.truncated[0] = true;
        ro.truncation_values[0] = 2.0;
        let adv = compute_gae(&ro, 0.5, 1.0);
        assert!((adv.advantages[0] - 2.0).abs() < 1e-12);
        assert!((adv.advantages[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_return_sums() {
        let ro = rollout_from(vec![1.0; 3], vec![0.0; 3], vec![false; 3], 100.0);
        assert_eq!(ro.empirical_return(1.0), 3.0);
        let zero = rollout_from(vec![0.0; 3], vec![0.0; 3], vec![false; 3], 1.0);
        assert_eq!(zero.empirical_return(0.99), 0.0);
    }

    #[test]
    fn ppo_count_formula() {
        assert_eq!(ppo_update_count(2048, 10, 512), 40);
        assert_eq!(ppo_update_count(10, 2, 3), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(PpoPhase::new(2048, 10, 512, &mut rng).unwrap().len(), 40);
    }

    #[test]
    fn a2c_softmax_gradient_matches_hand_computation() {
        // One-layer linear policy on a one-hot state: logits = W x.
        let w = Matrix::from_vec(3, 2, vec![0.2, -0.1, 0.5, 0.3, -0.4, 0.0]).unwrap();
        let policy = DenseNet::from_layers(vec![Layer::new(w, vec![0.0; 3], Activation::Identity).unwrap()]).unwrap();
        let value = DenseNet::from_layers(vec![
            Layer::new(Matrix::zeros(1, 2), vec![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap();
        let mut nets = PolicyValueNet {
            policy,
            value,
            log_std: None,
            action_space: ActionSpace::Discrete(3),
        };
        let x = vec![1.0, 0.0];
        let mut ro = rollout_from(vec![1.0], vec![0.0], vec![false], 0.0);
        ro.observations = vec![x.clone()];
        ro.actions = vec![Action::Discrete(1)];
        let adv = Advantages {
            advantages: vec![0.8],
            targets: vec![0.0],
        };
        let hp = PGHyperparams {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..PGHyperparams::a2c_defaults()
        };
        let mut opt = PgOptimizer::new(OptimizerKind::Sgd, &nets);
        let (_, grads) = a2c_update(&mut nets, &ro, &adv, &PGHyperparams { learning_rate: 1e-9, ..hp }, &mut opt).unwrap();

        let logits = [0.2, 0.5, -0.4];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        for j in 0..3 {
            let indicator = if j == 1 { 1.0 } else { 0.0 };
            let expected = -0.8 * (indicator - p[j]) * x[0];
            assert!((grads.policy.layers[0].weights.get(j, 0) - expected).abs() < 1e-12);
            assert_eq!(grads.policy.layers[0].weights.get(j, 1), 0.0);
        }
    }

    #[test]
    fn a2c_zero_advantage_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut nets = PolicyValueNet::for_env(EnvId::CartPole, &[8], &mut rng).unwrap();
        let mut runner = EnvRunner::new(EnvId::CartPole, 1, 1);
        let ro = collect_rollout(&mut runner, &nets, 5, &mut rng).unwrap();
        let adv = Advantages {
            advantages: vec![0.0; 5],
            targets: ro.values.clone(),
        };
        let hp = PGHyperparams {
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..PGHyperparams::a2c_defaults()
        };
        let before = nets.clone();
        let mut opt = PgOptimizer::for_algorithm(PgAlgorithm::A2c, &nets);
        let (_, grads) = a2c_update(&mut nets, &ro, &adv, &hp, &mut opt).unwrap();
        assert!(grads.policy.is_zero());
        assert_eq!(before, nets);
    }

    #[test]
    fn continuous_actions_sample_and_log_std_stays_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut nets = PolicyValueNet::for_env(EnvId::MountainCarContinuous, &[8], &mut rng).unwrap();
        nets.log_std = Some(vec![LOG_STD_MAX]);
        let mut runner = EnvRunner::new(EnvId::MountainCarContinuous, 1, 2);
        let ro = collect_rollout(&mut runner, &nets, 16, &mut rng).unwrap();
        let mut adv = compute_gae(&ro, 0.99, 0.95);
        adv.advantages.iter_mut().for_each(|a| *a = 10.0);
        let hp = PGHyperparams {
            learning_rate: 1.0,
            ..PGHyperparams::a2c_defaults()
        };
        let mut opt = PgOptimizer::new(OptimizerKind::Sgd, &nets);
        for _ in 0..5 {
            a2c_update(&mut nets, &ro, &adv, &hp, &mut opt).unwrap();
        }
        let ls = nets.log_std.as_ref().unwrap()[0];
        assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&ls));
    }

    #[test]
    fn hyperparam_set_get_validate() {
        let mut hp = PGHyperparams::ppo_defaults();
        hp.set("batch_size", 256.0).unwrap();
        assert_eq!(hp.get("batch_size").unwrap(), 256.0);
        assert!(hp.set("batch_size", 2.5).is_err());
        assert!(hp.set("momentum", 0.1).is_err());
        hp.validate(PgAlgorithm::Ppo).unwrap();
        hp.batch_size = 4096;
        assert!(hp.validate(PgAlgorithm::Ppo).is_err());
        hp.batch_size = 64;
        hp.clip = 1.0;
        assert!(hp.validate(PgAlgorithm::Ppo).is_err());
    }
}
