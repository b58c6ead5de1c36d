//! Episodic memory over (key, hyper-action) pairs.
//!
//! Reads are kernel-weighted averages over the K nearest stored keys that
//! hold the queried action. Writes move the K_w nearest values toward the
//! observed return and insert the key when it is new; the oldest entry is
//! evicted once the store is full.

mod kdtree;

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::codec::{ByteReader, ByteWriter};
use crate::{Error, Result};
use kdtree::{dist_sq, ActionIndex};

pub use kdtree::LINEAR_SCAN_BELOW;

pub const KERNEL_EPS: f64 = 0.001;
/// Keys closer than this count as already stored.
pub const EXACT_MATCH_TOL: f64 = 1e-12;
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"EPGTMEM\0";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant,
    /// β = 1/(n+1) where n counts the writes an entry has absorbed.
    Harmonic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub key_dim: usize,
    pub num_actions: usize,
    pub capacity: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_schedule")]
    pub beta_schedule: BetaSchedule,
    #[serde(default = "default_k")]
    pub k_read: usize,
    #[serde(default = "default_k")]
    pub k_write: usize,
    #[serde(default = "default_eps")]
    pub kernel_eps: f64,
}

fn default_beta() -> f64 {
    0.5
}
fn default_schedule() -> BetaSchedule {
    BetaSchedule::Constant
}
fn default_k() -> usize {
    3
}
fn default_eps() -> f64 {
    KERNEL_EPS
}

impl MemoryConfig {
    pub fn new(key_dim: usize, num_actions: usize, capacity: usize) -> Self {
        Self {
            key_dim,
            num_actions,
            capacity,
            beta: default_beta(),
            beta_schedule: default_schedule(),
            k_read: default_k(),
            k_write: default_k(),
            kernel_eps: KERNEL_EPS,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("memory: {m}")));
        if self.key_dim == 0 || self.num_actions == 0 || self.capacity == 0 {
            return bad("key_dim, num_actions and capacity must be positive");
        }
        if self.num_actions > u32::MAX as usize {
            return bad("too many actions");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if self.k_read == 0 || self.k_write == 0 {
            return bad("neighbor counts must be positive");
        }
        if !(self.kernel_eps > 0.0 && self.kernel_eps.is_finite()) {
            return bad("kernel_eps must be positive");
        }
        Ok(())
    }
}

/// `1 / (‖a − b‖ + eps)`.
pub fn similarity(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch(a.len(), b.len(), "similarity keys"));
    }
    Ok(1.0 / (dist_sq(a, b).sqrt() + eps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub seq: u64,
    pub action: usize,
    pub value: f64,
    pub writes: u64,
    pub key: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub seq: u64,
    pub distance: f64,
    pub similarity: f64,
}

/// Neighbors sorted by descending similarity.
pub type NeighborSet = Vec<Neighbor>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadResult {
    pub value: f64,
    /// No entry holds this action; `value` is 0.
    pub missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WriteOutcome {
    pub updated: usize,
    pub inserted: bool,
    pub evicted: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    config: MemoryConfig,
    entries: VecDeque<Entry>,
    front_seq: u64,
    next_seq: u64,
    indices: Vec<ActionIndex>,
}

impl PartialEq for EpisodicMemory {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.entries == other.entries && self.next_seq == other.next_seq
    }
}

impl EpisodicMemory {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        let indices = (0..config.num_actions).map(|_| ActionIndex::new(config.key_dim)).collect();
        Ok(Self {
            config,
            entries: VecDeque::new(),
            front_seq: 0,
            next_seq: 0,
            indices,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter()
    }

    pub fn entry(&self, seq: u64) -> Option<&Entry> {
        seq.checked_sub(self.front_seq).and_then(|i| self.entries.get(i as usize))
    }

    pub fn count_for_action(&self, action: usize) -> usize {
        self.indices.get(action).map_or(0, ActionIndex::live)
    }

    fn check(&self, key: &[f64], action: usize) -> Result<()> {
        if key.len() != self.config.key_dim {
            return Err(Error::mismatch(self.config.key_dim, key.len(), "memory key"));
        }
        if action >= self.config.num_actions {
            return Err(Error::Hyperparam(format!(
                "action {action} outside {} hyper-actions",
                self.config.num_actions
            )));
        }
        if !key.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("memory key"));
        }
        Ok(())
    }

    /// The `k` nearest same-action entries.
    pub fn neighbors(&self, key: &[f64], action: usize, k: usize) -> Result<NeighborSet> {
        self.check(key, action)?;
        Ok(self.indices[action]
            .nearest(key, k, self.front_seq)
            .into_iter()
            .map(|c| {
                let distance = c.dist_sq.sqrt();
                Neighbor {
                    seq: c.seq,
                    distance,
                    similarity: 1.0 / (distance + self.config.kernel_eps),
                }
            })
            .collect())
    }

    pub fn read(&self, key: &[f64], action: usize) -> Result<ReadResult> {
        let neighbors = self.neighbors(key, action, self.config.k_read)?;
        if neighbors.is_empty() {
            return Ok(ReadResult {
                value: 0.0,
                missing: true,
            });
        }
        let (mut num, mut den) = (0.0, 0.0);
        for n in &neighbors {
            num += n.similarity * self.entry(n.seq).expect("indexed entry is live").value;
            den += n.similarity;
        }
        Ok(ReadResult {
            value: num / den,
            missing: false,
        })
    }

    /// Reads for every action in index order.
    pub fn q_values(&self, key: &[f64]) -> Result<Vec<ReadResult>> {
        (0..self.config.num_actions).map(|a| self.read(key, a)).collect()
    }

    /// One write of return `g` for `(key, action)`.
    pub fn write(&mut self, key: &[f64], action: usize, g: f64) -> Result<WriteOutcome> {
        self.check(key, action)?;
        if !g.is_finite() {
            return Err(Error::NonFinite("memory write return"));
        }
        let neighbors = self.neighbors(key, action, self.config.k_write)?;
        let total: f64 = neighbors.iter().map(|n| n.similarity).sum();
        let exact = neighbors.first().is_some_and(|n| n.distance <= EXACT_MATCH_TOL);
        for n in &neighbors {
            let beta = self.config.beta;
            let schedule = self.config.beta_schedule;
            let i = (n.seq - self.front_seq) as usize;
            let e = &mut self.entries[i];
            let rate = match schedule {
                BetaSchedule::Constant => beta,
                BetaSchedule::Harmonic => 1.0 / (e.writes as f64 + 1.0),
            };
            e.value += rate * (g - e.value) * n.similarity / total;
            e.writes += 1;
        }
        let mut outcome = WriteOutcome {
            updated: neighbors.len(),
            ..WriteOutcome::default()
        };
        if !exact {
            outcome.evicted = self.insert(key.to_vec(), action, g, 1);
            outcome.inserted = true;
        }
        Ok(outcome)
    }

    /// Applies a batch of writes in order.
    pub fn update<'a, I>(&mut self, writes: I) -> Result<usize>
    where
        I: IntoIterator<Item = (&'a [f64], usize, f64)>,
    {
        let mut inserted = 0;
        for (key, action, g) in writes {
            inserted += self.write(key, action, g)?.inserted as usize;
        }
        Ok(inserted)
    }

    /// Appends an entry without touching neighbors.
    pub fn insert_raw(&mut self, key: &[f64], action: usize, value: f64) -> Result<Option<u64>> {
        self.check(key, action)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("memory value"));
        }
        Ok(self.insert(key.to_vec(), action, value, 1))
    }

    fn insert(&mut self, key: Vec<f64>, action: usize, value: f64, writes: u64) -> Option<u64> {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.indices[action].insert(seq, &key, self.front_seq);
        self.entries.push_back(Entry {
            seq,
            action,
            value,
            writes,
            key,
        });
        if self.entries.len() > self.config.capacity {
            let old = self.entries.pop_front().expect("store is non-empty");
            self.front_seq = old.seq + 1;
            self.indices[old.action].evict(old.seq, self.front_seq);
            Some(old.seq)
        } else {
            None
        }
    }

    /// Serializes configuration and entries. The layout (little-endian):
    ///
    /// ```text
    /// magic "EPGTMEM\0", version u32
    /// key_dim u32, num_actions u32, capacity u64, beta f64,
    /// beta_schedule u8 (0 constant, 1 harmonic), k_read u32, k_write u32,
    /// kernel_eps f64, next_seq u64, count u64
    /// count × (seq u64, action u32, writes u64, value f64, key key_dim × f64)
    /// ```
    pub fn snapshot(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(Vec::new());
        let c = &self.config;
        let put = |w: &mut ByteWriter<Vec<u8>>| -> Result<()> {
            w.bytes(SNAPSHOT_MAGIC)?;
            w.u32(SNAPSHOT_VERSION)?;
            w.u32(c.key_dim as u32)?;
            w.u32(c.num_actions as u32)?;
            w.u64(c.capacity as u64)?;
            w.f64(c.beta)?;
            w.u8(match c.beta_schedule {
                BetaSchedule::Constant => 0,
                BetaSchedule::Harmonic => 1,
            })?;
            w.u32(c.k_read as u32)?;
            w.u32(c.k_write as u32)?;
            w.f64(c.kernel_eps)?;
            w.u64(self.next_seq)?;
            w.u64(self.entries.len() as u64)?;
            for e in &self.entries {
                w.u64(e.seq)?;
                w.u32(e.action as u32)?;
                w.u64(e.writes)?;
                w.f64(e.value)?;
                w.f64s(&e.key)?;
            }
            Ok(())
        };
        put(&mut w).expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if &r.exact::<8>()? != SNAPSHOT_MAGIC {
            return Err(Error::Corrupt("not a memory snapshot".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Version {
                expected: SNAPSHOT_VERSION,
                found: version,
            });
        }
        let key_dim = r.u32()? as usize;
        let num_actions = r.u32()? as usize;
        let capacity = usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("capacity overflow".into()))?;
        let beta = r.f64()?;
        let beta_schedule = match r.u8()? {
            0 => BetaSchedule::Constant,
            1 => BetaSchedule::Harmonic,
            other => return Err(Error::Corrupt(format!("unknown beta schedule {other}"))),
        };
        let k_read = r.u32()? as usize;
        let k_write = r.u32()? as usize;
        let kernel_eps = r.f64()?;
        let next_seq = r.u64()?;
        let count = r.u64()?;
        let config = MemoryConfig {
            key_dim,
            num_actions,
            capacity,
            beta,
            beta_schedule,
            k_read,
            k_write,
            kernel_eps,
        };
        let mut mem = Self::new(config).map_err(|e| Error::Corrupt(e.to_string()))?;
        if count > capacity as u64 || count > next_seq || key_dim > 1 << 20 {
            return Err(Error::Corrupt("entry count inconsistent with header".into()));
        }
        mem.front_seq = next_seq - count;
        mem.next_seq = mem.front_seq;
        for i in 0..count {
            let seq = r.u64()?;
            if seq != mem.front_seq + i {
                return Err(Error::Corrupt("sequence numbers not contiguous".into()));
            }
            let action = r.u32()? as usize;
            let writes = r.u64()?;
            let value = r.f64()?;
            let key = r.f64s(key_dim)?;
            if action >= num_actions || !value.is_finite() || !key.iter().all(|x| x.is_finite()) {
                return Err(Error::Corrupt(format!("invalid entry {seq}")));
            }
            mem.next_seq = seq;
            mem.insert(key, action, value, writes);
        }
        r.finish()?;
        if mem.next_seq != next_seq {
            return Err(Error::Corrupt("sequence counter mismatch".into()));
        }
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::restore(&std::fs::read(path)?)
    }
}

/// With probability ε a uniform action, else the first argmax.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> Result<usize> {
    select_action_with(q_values.len(), epsilon, rng, || Ok(q_values.to_vec()))
}

/// [`select_action`] over `n` actions that only evaluates `q_values` when
/// the greedy branch is taken. Draws from `rng` exactly as
/// [`select_action`] does.
pub fn select_action_with<R, F>(n: usize, epsilon: f64, rng: &mut R, q_values: F) -> Result<usize>
where
    R: Rng + ?Sized,
    F: FnOnce() -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(Error::Hyperparam("no actions to select from".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Hyperparam(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..n));
    }
    let q = q_values()?;
    if q.len() != n {
        return Err(Error::mismatch(n, q.len(), "q-value count"));
    }
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `1 − step / total`, with `step` clamped to `total`.
pub fn epsilon_schedule(step: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("epsilon schedule needs a positive total".into()));
    }
    Ok(1.0 - step.min(total) as f64 / total as f64)
}
