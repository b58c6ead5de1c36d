//! Episodic environments for the inner learner.
//!
//! Dynamics follow the widely published classic-control equations:
//!
//! - **CartPole**: gravity 9.8, cart mass 1.0, pole mass 0.1, half pole
//!   length 0.5, force 10, τ = 0.02, explicit Euler. +1 per step including
//!   the failing one; terminates when |x| > 2.4 or |θ| > 12°. Cap 500.
//! - **MountainCarContinuous**: power 0.0015, gravity term 0.0025·cos(3x),
//!   speed limit 0.07, position in [-1.2, 0.6]. Reward −0.1·a² per step plus
//!   100 on reaching x ≥ 0.45. Cap 999.
//! - **SparseGrid**: 5×5 grid, start (0,0), goal (4,4), four moves. Reward 1
//!   only when the goal is entered. Cap 100.
//!
//! Hitting the cap sets `truncated`, never `done`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    #[serde(rename = "cartpole", alias = "cart_pole")]
    CartPole,
    #[serde(alias = "mcc")]
    MountainCarContinuous,
    SparseGrid,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::CartPole => "cartpole",
            EnvId::MountainCarContinuous => "mountain_car_continuous",
            EnvId::SparseGrid => "sparse_grid",
        }
    }

    pub fn episode_cap(self) -> usize {
        match self {
            EnvId::CartPole => 500,
            EnvId::MountainCarContinuous => 999,
            EnvId::SparseGrid => 100,
        }
    }

    pub fn observation_dim(self) -> usize {
        match self {
            EnvId::CartPole => 4,
            EnvId::MountainCarContinuous => 2,
            EnvId::SparseGrid => 2,
        }
    }

    pub fn action_space(self) -> ActionSpace {
        match self {
            EnvId::CartPole => ActionSpace::Discrete(2),
            EnvId::MountainCarContinuous => ActionSpace::Continuous {
                dim: 1,
                low: -1.0,
                high: 1.0,
            },
            EnvId::SparseGrid => ActionSpace::Discrete(4),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cart_pole" | "cartpole" => Ok(EnvId::CartPole),
            "mountain_car_continuous" | "mountaincarcontinuous" | "mcc" => Ok(EnvId::MountainCarContinuous),
            "sparse_grid" | "sparsegrid" => Ok(EnvId::SparseGrid),
            other => Err(Error::Env(format!("unknown environment id {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Width of the policy head: logits for discrete, means for continuous.
    pub fn head_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

// CartPole constants.
const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const X_THRESHOLD: f64 = 2.4;
const THETA_THRESHOLD: f64 = 12.0 * 2.0 * PI / 360.0;

// MountainCarContinuous constants.
const MC_MIN_POS: f64 = -1.2;
const MC_MAX_POS: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL: f64 = 0.45;
const MC_POWER: f64 = 0.0015;

const GRID: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    NeedsReset,
    Running,
}

/// One running environment: id, physical state, step counter and RNG.
#[derive(Debug, Clone)]
pub struct EnvInstance {
    id: EnvId,
    state: Vec<f64>,
    steps: usize,
    cap: usize,
    rng: StreamRng,
    status: Status,
}

impl EnvInstance {
    pub fn new(id: EnvId, seed: u64) -> Self {
        Self {
            id,
            state: vec![0.0; id.observation_dim()],
            steps: 0,
            cap: id.episode_cap(),
            rng: StreamRng::seed_from_u64(seed),
            status: Status::NeedsReset,
        }
    }

    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episode_cap(&self) -> usize {
        self.cap
    }

    pub fn action_space(&self) -> ActionSpace {
        self.id.action_space()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Replaces the physical state, e.g. to start from a hand-picked point.
    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.state.len() {
            return Err(Error::mismatch(self.state.len(), state.len(), "environment state"));
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("environment state"));
        }
        self.state.copy_from_slice(state);
        self.status = Status::Running;
        Ok(())
    }

    /// Reseeds the environment RNG, then resets.
    pub fn reset_with_seed(&mut self, seed: u64) -> Vec<f64> {
        self.rng = StreamRng::seed_from_u64(seed);
        self.reset()
    }

    /// Resets with the next draw from the environment's own RNG.
    pub fn reset(&mut self) -> Vec<f64> {
        match self.id {
            EnvId::CartPole => {
                for s in &mut self.state {
                    *s = self.rng.gen_range(-0.05..=0.05);
                }
            }
            EnvId::MountainCarContinuous => {
                self.state[0] = self.rng.gen_range(-0.6..=-0.4);
                self.state[1] = 0.0;
            }
            EnvId::SparseGrid => {
                self.state[0] = 0.0;
                self.state[1] = 0.0;
            }
        }
        self.steps = 0;
        self.status = Status::Running;
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        match self.id {
            EnvId::SparseGrid => self.state.iter().map(|c| c / (GRID - 1) as f64).collect(),
            _ => self.state.clone(),
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.status != Status::Running {
            return Err(Error::Env("step called before reset or after episode end".into()));
        }
        let (reward, done) = match (self.id, action) {
            (EnvId::CartPole, Action::Discrete(a)) => self.cartpole_step(*a)?,
            (EnvId::SparseGrid, Action::Discrete(a)) => self.grid_step(*a)?,
            (EnvId::MountainCarContinuous, Action::Continuous(a)) => self.mountain_car_step(a)?,
            (id, a) => return Err(Error::Env(format!("action {a:?} does not fit {id}"))),
        };
        self.steps += 1;
        let truncated = !done && self.steps >= self.cap;
        if done || truncated {
            self.status = Status::NeedsReset;
        }
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done,
            truncated,
        })
    }

    fn cartpole_step(&mut self, action: usize) -> Result<(f64, bool)> {
        if action >= 2 {
            return Err(Error::Env(format!("cart-pole action {action} out of range")));
        }
        let [x, x_dot, theta, theta_dot] = [self.state[0], self.state[1], self.state[2], self.state[3]];
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc =
            (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        self.state = vec![
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        let failed = self.state[0].abs() > X_THRESHOLD || self.state[2].abs() > THETA_THRESHOLD;
        Ok((1.0, failed))
    }

    fn mountain_car_step(&mut self, action: &[f64]) -> Result<(f64, bool)> {
        if action.len() != 1 {
            return Err(Error::mismatch(1, action.len(), "mountain-car action"));
        }
        if !action[0].is_finite() {
            return Err(Error::NonFinite("mountain-car action"));
        }
        let force = action[0].clamp(-1.0, 1.0);
        let (mut pos, mut vel) = (self.state[0], self.state[1]);
        vel += force * MC_POWER - 0.0025 * (3.0 * pos).cos();
        vel = vel.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
        pos += vel;
        pos = pos.clamp(MC_MIN_POS, MC_MAX_POS);
        if pos == MC_MIN_POS && vel < 0.0 {
            vel = 0.0;
        }
        self.state[0] = pos;
        self.state[1] = vel;
        let reached = pos >= MC_GOAL && vel >= 0.0;
        let reward = if reached { 100.0 } else { 0.0 } - 0.1 * force * force;
        Ok((reward, reached))
    }

    fn grid_step(&mut self, action: usize) -> Result<(f64, bool)> {
        let (dr, dc) = match action {
            0 => (-1, 0),
            1 => (1, 0),
            2 => (0, -1),
            3 => (0, 1),
            _ => return Err(Error::Env(format!("grid action {action} out of range"))),
        };
        let r = (self.state[0] as i64 + dr).clamp(0, GRID - 1);
        let c = (self.state[1] as i64 + dc).clamp(0, GRID - 1);
        self.state[0] = r as f64;
        self.state[1] = c as f64;
        let at_goal = r == GRID - 1 && c == GRID - 1;
        Ok((if at_goal { 1.0 } else { 0.0 }, at_goal))
    }
}
