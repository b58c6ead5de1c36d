//! Slow, literal reference implementations used to validate the fast paths.
//!
//! [`verify`] bundles a quick pass over all of them; the CLI exposes it as
//! `epgt verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{loss_and_gradients, EncoderDecoder, Projections, RawHyperState};
use crate::hyperrl::lr_bins;
use crate::memory::{epsilon_schedule, BetaSchedule, EpisodicMemory, MemoryConfig, KERNEL_EPS};
use crate::nn::{Activation, DenseNet, Matrix};
use crate::{Error, Result};

/// A stored tuple as seen by the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEntry {
    pub seq: u64,
    pub key: Vec<f64>,
    pub action: usize,
    pub value: f64,
}

impl OracleEntry {
    pub fn from_memory(mem: &EpisodicMemory) -> Vec<Self> {
        mem.entries()
            .map(|e| Self {
                seq: e.seq,
                key: e.key.clone(),
                action: e.action,
                value: e.value,
            })
            .collect()
    }
}

/// Kernel-weighted average over the `k` nearest same-action entries, by
/// sorting every candidate. `None` when the action has no entries.
pub fn brute_knn(entries: &[OracleEntry], query: &[f64], action: usize, k: usize, eps: f64) -> Option<f64> {
    let mut scored: Vec<(f64, u64, f64)> = entries
        .iter()
        .filter(|e| e.action == action)
        .map(|e| {
            let d = e.key.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            (d, e.seq, e.value)
        })
        .collect();
    if scored.is_empty() {
        return None;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (num, den) = scored
        .iter()
        .take(k)
        .fold((0.0, 0.0), |(n, d), (dist, _, v)| {
            let w = 1.0 / (dist + eps);
            (n + w * v, d + w)
        });
    Some(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BetaMode {
    Constant { beta: f64 },
    Harmonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteRule {
    Average,
    /// Keep the largest return seen for an exactly matching key.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteSimConfig {
    pub mean: f64,
    pub std: f64,
    pub beta: BetaMode,
    pub writes: usize,
    pub trials: usize,
    pub seed: u64,
    /// Fixed keys spaced evenly on a line; writes cycle through them.
    pub keys: usize,
    pub spacing: f64,
    pub k_write: usize,
    pub rule: WriteRule,
    /// Starting value of every key; `None` lets the first write insert.
    pub initial_value: Option<f64>,
}

impl Default for WriteSimConfig {
    fn default() -> Self {
        Self {
            mean: 1.0,
            std: 0.5,
            beta: BetaMode::Harmonic,
            writes: 10_000,
            trials: 100,
            seed: 0,
            keys: 1,
            spacing: 1.0,
            k_write: 3,
            rule: WriteRule::Average,
            initial_value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WriteSimReport {
    /// Value stored at the first key after the last write, per trial.
    pub terminal: Vec<f64>,
    /// Sample mean of the returns drawn in each trial.
    pub running_means: Vec<f64>,
    /// First-key value after every write of trial 0.
    pub trajectory: Vec<f64>,
}

/// Replays the write rule against i.i.d. normal returns. The average rule
/// drives a real [`EpisodicMemory`]; the max rule is a per-key table.
/// Each trial draws the same return stream under either rule for a given
/// seed, so the two are directly comparable.
pub fn simulate_writes(cfg: &WriteSimConfig) -> Result<WriteSimReport> {
    if cfg.writes == 0 || cfg.trials == 0 || cfg.keys == 0 || !(cfg.std >= 0.0) {
        return Err(Error::Config("write simulation needs writes, trials, keys > 0 and std >= 0".into()));
    }
    let normal = Normal::new(cfg.mean, cfg.std).map_err(|e| Error::Config(e.to_string()))?;
    let mut report = WriteSimReport {
        terminal: Vec::with_capacity(cfg.trials),
        running_means: Vec::with_capacity(cfg.trials),
        trajectory: Vec::new(),
    };
    let key_of = |i: usize| vec![i as f64 * cfg.spacing];
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
        let mut sum = 0.0;
        let record = trial == 0;
        let terminal = match cfg.rule {
            WriteRule::Average => {
                let mut mc = MemoryConfig::new(1, 1, cfg.keys.max(1));
                mc.k_write = cfg.k_write;
                match cfg.beta {
                    BetaMode::Constant { beta } => mc.beta = beta,
                    BetaMode::Harmonic => mc.beta_schedule = BetaSchedule::Harmonic,
                }
                let mut mem = EpisodicMemory::new(mc)?;
                if let Some(v0) = cfg.initial_value {
                    for i in 0..cfg.keys {
                        mem.insert_raw(&key_of(i), 0, v0)?;
                    }
                }
                for w in 0..cfg.writes {
                    let g = normal.sample(&mut rng);
                    sum += g;
                    mem.write(&key_of(w % cfg.keys), 0, g)?;
                    if record {
                        report.trajectory.push(first_key_value(&mem));
                    }
                }
                first_key_value(&mem)
            }
            WriteRule::Max => {
                let mut table: Vec<Option<f64>> = vec![cfg.initial_value; cfg.keys];
                for w in 0..cfg.writes {
                    let g = normal.sample(&mut rng);
                    sum += g;
                    let slot = &mut table[w % cfg.keys];
                    *slot = Some(slot.map_or(g, |m| m.max(g)));
                    if record {
                        report.trajectory.push(table[0].unwrap_or(0.0));
                    }
                }
                table[0].unwrap_or(0.0)
            }
        };
        report.terminal.push(terminal);
        report.running_means.push(sum / cfg.writes as f64);
    }
    Ok(report)
}

fn first_key_value(mem: &EpisodicMemory) -> f64 {
    mem.entries().find(|e| e.key[0] == 0.0).map_or(0.0, |e| e.value)
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("finite-difference loss"));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Magnitudes below this are compared as if they were this large.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Worst relative error between backprop and central differences for a
/// random network under a random quadratic-plus-linear loss.
pub fn check_net_gradients(sizes: &[usize], acts: &[Activation], seed: u64, step: f64) -> Result<f64> {
    let net = DenseNet::new(sizes, acts, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |out: &[f64]| -> f64 { out.iter().zip(&c).map(|(o, ci)| 0.5 * o * o + ci * o).sum() };
    let (out, cache) = net.forward(&x)?;
    let dout: Vec<f64> = out.iter().zip(&c).map(|(o, ci)| o + ci).collect();
    let (grads, dx) = net.backward(&cache, &dout)?;
    let analytic: Vec<f64> = grads.iter().collect();
    let params: Vec<f64> = net.params().collect();
    let mut probe = net.clone();
    let numeric = finite_diff_grad(
        |p| {
            for (dst, src) in probe.params_mut().zip(p) {
                *dst = *src;
            }
            loss(&probe.predict(&x).expect("shape fixed"))
        },
        &params,
        step,
    )?;
    let numeric_dx = finite_diff_grad(|xi| loss(&net.predict(xi).expect("shape fixed")), &x, step)?;
    Ok(max_relative_error(&analytic, &numeric).max(max_relative_error(&dx, &numeric_dx)))
}

/// Same check for the VAE loss with respect to φ, ω and the projections,
/// with noise and reconstruction targets held fixed.
pub fn check_encoder_gradients(shapes: &[(usize, usize)], d: usize, latent: usize, seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Projections::new(shapes, d, &mut rng)?;
    let s_dim = Projections::output_dim(shapes, d);
    let vae = EncoderDecoder::new(s_dim, latent, &mut rng)?;
    let raws: Vec<RawHyperState> = (0..3)
        .map(|_| RawHyperState {
            tensors: shapes
                .iter()
                .map(|&(r, c)| {
                    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
                })
                .collect(),
        })
        .collect();
    let targets = raws.iter().map(|r| proj.project(r)).collect::<Result<Vec<_>>>()?;
    let noise: Vec<Vec<f64>> = (0..raws.len())
        .map(|_| (0..latent).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let beta_kl = 0.1;
    let (_, grads) = loss_and_gradients(&vae, &proj, &raws, &targets, &noise, beta_kl)?;

    let total = |vae: &EncoderDecoder, proj: &Projections| {
        loss_and_gradients(vae, proj, &raws, &targets, &noise, beta_kl)
            .expect("shapes fixed")
            .0
            .total
    };
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let net = if which == 0 { &vae.phi } else { &vae.omega };
        let analytic: Vec<f64> = if which == 0 { &grads.phi } else { &grads.omega }.iter().collect();
        let params: Vec<f64> = net.params().collect();
        let mut probe = vae.clone();
        let numeric = finite_diff_grad(
            |p| {
                let target = if which == 0 { &mut probe.phi } else { &mut probe.omega };
                for (dst, src) in target.params_mut().zip(p) {
                    *dst = *src;
                }
                total(&probe, &proj)
            },
            &params,
            step,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    let analytic: Vec<f64> = grads.projections.iter().flat_map(|m| m.data().iter().copied()).collect();
    let params: Vec<f64> = proj.matrices().iter().flat_map(|m| m.data().iter().copied()).collect();
    let mut probe = proj.clone();
    let numeric = finite_diff_grad(
        |p| {
            let mut it = p.iter();
            for m in probe.matrices_mut() {
                for v in m.data_mut() {
                    *v = *it.next().expect("sized");
                }
            }
            total(&vae, &probe)
        },
        &params,
        step,
    )?;
    Ok(worst.max(max_relative_error(&analytic, &numeric)))
}

/// Worst relative disagreement between memory reads and [`brute_knn`] over
/// `stores` random memories.
pub fn check_knn_agreement(stores: usize, max_size: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for s in 0..stores {
        let size = 1 + rng.gen_range(0..max_size);
        let k = [1, 3, 5][s % 3];
        let dim = rng.gen_range(1..=8);
        let actions = rng.gen_range(1..=4);
        let mut cfg = MemoryConfig::new(dim, actions, size);
        cfg.k_read = k;
        let mut mem = EpisodicMemory::new(cfg)?;
        for _ in 0..size {
            let key: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            mem.insert_raw(&key, rng.gen_range(0..actions), rng.gen_range(-10.0..10.0))?;
        }
        let entries = OracleEntry::from_memory(&mem);
        for _ in 0..4 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.2..1.2)).collect();
            for a in 0..actions {
                let got = mem.read(&q, a)?;
                match brute_knn(&entries, &q, a, k, KERNEL_EPS) {
                    None if got.missing => {}
                    None => return Ok(f64::INFINITY),
                    Some(v) => worst = worst.max((got.value - v).abs() / v.abs().max(REL_ERR_FLOOR)),
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn line(name: &str, passed: bool, detail: String) -> VerifyLine {
    VerifyLine {
        name: name.into(),
        passed,
        detail,
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Quick self-check of the core properties. Smaller than the acceptance
/// suite so it runs in seconds.
pub fn verify(seed: u64) -> Result<Vec<VerifyLine>> {
    let mut out = Vec::new();

    let archs: [(&[usize], &[Activation]); 3] = [
        (&[3, 5, 2], &[Activation::Tanh, Activation::Identity]),
        (&[4, 6, 6, 3], &[Activation::Relu, Activation::Sigmoid, Activation::Tanh]),
        (&[2, 1], &[Activation::Sigmoid]),
    ];
    let mut worst: f64 = 0.0;
    for (i, (s, a)) in archs.iter().enumerate() {
        worst = worst.max(check_net_gradients(s, a, seed + i as u64, 1e-5)?);
    }
    out.push(line("nn gradients vs central differences", worst < 1e-4, format!("max rel err {worst:.2e}")));

    let enc = check_encoder_gradients(&[(3, 2), (2, 3)], 2, 2, seed, 1e-5)?;
    out.push(line("encoder gradients vs central differences", enc < 1e-4, format!("max rel err {enc:.2e}")));

    let knn = check_knn_agreement(100, 200, seed)?;
    out.push(line("memory read vs brute-force KNN", knn < 1e-9, format!("max rel diff {knn:.2e}")));

    let harmonic = simulate_writes(&WriteSimConfig {
        writes: 2_000,
        trials: 40,
        seed,
        ..WriteSimConfig::default()
    })?;
    let se = 0.5 / (2_000f64).sqrt();
    let inside = harmonic.terminal.iter().filter(|v| (*v - 1.0).abs() <= 3.0 * se).count();
    out.push(line(
        "harmonic writes converge to the mean",
        inside * 100 >= 95 * harmonic.terminal.len(),
        format!("{inside}/{} within 3 SE", harmonic.terminal.len()),
    ));

    let avg_cfg = WriteSimConfig {
        beta: BetaMode::Constant { beta: 0.5 },
        writes: 200,
        trials: 40,
        seed,
        ..WriteSimConfig::default()
    };
    let avg = simulate_writes(&avg_cfg)?;
    let max = simulate_writes(&WriteSimConfig {
        rule: WriteRule::Max,
        ..avg_cfg.clone()
    })?;
    let dominated = avg.terminal.iter().zip(&max.terminal).all(|(a, m)| m >= a);
    out.push(line("max rule bounds the average rule", dominated, format!("{} trials", avg.terminal.len())));

    let closed = simulate_writes(&WriteSimConfig {
        mean: 2.0,
        std: 0.0,
        beta: BetaMode::Constant { beta: 0.5 },
        writes: 20,
        trials: 1,
        initial_value: Some(0.0),
        ..WriteSimConfig::default()
    })?;
    let geo = closed
        .trajectory
        .iter()
        .enumerate()
        .map(|(n, v)| (v - 2.0 * (1.0 - 0.5f64.powi(n as i32 + 1))).abs())
        .fold(0.0, f64::max);
    out.push(line("constant-beta closed form", geo < 1e-12, format!("max abs err {geo:.1e}")));

    let (m, s) = mean_and_se(&avg.terminal);
    out.push(line(
        "constant-beta long-run mean is unbiased",
        (m - 1.0).abs() <= 3.0 * s,
        format!("mean {m:.4} se {s:.4}"),
    ));

    let mut lr_ok = true;
    for b in [3, 5, 15] {
        let bins = lr_bins(7e-4, b)?;
        lr_ok &= bins.len() == b && bins.contains(&7e-4);
    }
    out.push(line("learning-rate bins", lr_ok, "B in {3, 5, 15}".into()));

    let eps_ok = epsilon_schedule(0, 100)? == 1.0
        && epsilon_schedule(100, 100)? == 0.0
        && (1..100).all(|s| (epsilon_schedule(s, 100).unwrap() - (1.0 - s as f64 / 100.0)).abs() < 1e-15);
    out.push(line("epsilon schedule endpoints and linearity", eps_ok, "total 100".into()));

    let mut fifo = EpisodicMemory::new(MemoryConfig::new(1, 1, 50))?;
    let mut fifo_ok = true;
    for i in 0..1_000u64 {
        fifo.write(&[i as f64], 0, 0.0)?;
        let oldest = fifo.entries().next().map(|e| e.seq).unwrap_or(0);
        fifo_ok &= fifo.len() <= 50 && oldest == i.saturating_sub(49);
    }
    out.push(line("FIFO eviction and capacity", fifo_ok, "1000 inserts, capacity 50".into()));

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic() {
        let g = finite_diff_grad(|w| w[0] * w[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let z = finite_diff_grad(|_| 4.0, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn brute_knn_basics() {
        let e = |seq, x: f64, v| OracleEntry {
            seq,
            key: vec![x],
            action: 0,
            value: v,
        };
        assert_eq!(brute_knn(&[e(0, 0.5, 7.0)], &[0.0], 0, 3, KERNEL_EPS), Some(7.0));
        let same = [e(0, 0.1, 2.0), e(1, 0.9, 2.0), e(2, -0.4, 2.0)];
        assert!((brute_knn(&same, &[0.0], 0, 3, KERNEL_EPS).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(brute_knn(&same, &[0.0], 1, 3, KERNEL_EPS), None);
    }

    #[test]
    fn sigma_zero_converges_monotonically() {
        for beta in [BetaMode::Harmonic, BetaMode::Constant { beta: 0.5 }] {
            let r = simulate_writes(&WriteSimConfig {
                mean: 3.0,
                std: 0.0,
                beta,
                writes: 30,
                trials: 1,
                initial_value: Some(0.0),
                ..WriteSimConfig::default()
            })
            .unwrap();
            assert!(r.trajectory.windows(2).all(|w| w[1] >= w[0] && w[1] <= 3.0));
        }
    }

    #[test]
    fn verify_passes() {
        for l in verify(0).unwrap() {
            assert!(l.passed, "{}: {}", l.name, l.detail);
        }
    }
}
