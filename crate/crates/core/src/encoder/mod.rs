//! Hyper-state embedding.
//!
//! A raw hyper-state is a list of weight-shaped tensors (parameters and
//! recent gradients). Each tensor `W` is multiplied by its own projection
//! `C` and the products are concatenated into `s`. A small VAE trained to
//! reconstruct `s` maps it to an `h`-dimensional key. The key is the
//! posterior mean, so embedding is deterministic.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::codec::{read_matrix, read_net_record, write_matrix, write_net_record, ByteReader, ByteWriter};
use crate::nn::{Activation, DenseNet, GradientSet, Matrix, OptimizerKind, OptimizerState};
use crate::rng::StreamRng;
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const SNAPSHOT_MAGIC: &[u8; 8] = b"EPGTENC\0";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Weight-shaped tensors in block order: outer loop over order
/// (0 = parameters, then gradients newest first), inner over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHyperState {
    pub tensors: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    mats: Vec<Matrix>,
    d: usize,
}

impl Projections {
    /// One `cols × d` matrix per tensor shape, entries N(0, 1/cols).
    pub fn new<R: Rng + ?Sized>(shapes: &[(usize, usize)], d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || shapes.is_empty() {
            return Err(Error::Sizing("projections need d > 0 and at least one tensor".into()));
        }
        let mut mats = Vec::with_capacity(shapes.len());
        for &(_, cols) in shapes {
            if cols == 0 {
                return Err(Error::Sizing("zero-width tensor".into()));
            }
            let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("positive std");
            let data = (0..cols * d).map(|_| normal.sample(rng)).collect();
            mats.push(Matrix::from_vec(cols, d, data)?);
        }
        Ok(Self { mats, d })
    }

    pub fn from_matrices(mats: Vec<Matrix>) -> Result<Self> {
        let d = mats.first().map(Matrix::cols).ok_or_else(|| Error::Sizing("no projections".into()))?;
        if mats.iter().any(|m| m.cols() != d) {
            return Err(Error::Sizing("projections disagree on d".into()));
        }
        Ok(Self { mats, d })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn matrices_mut(&mut self) -> &mut [Matrix] {
        &mut self.mats
    }

    /// Length of the projected vector for tensors with these row counts.
    pub fn output_dim(shapes: &[(usize, usize)], d: usize) -> usize {
        shapes.iter().map(|(r, _)| r * d).sum()
    }

    /// `s = concat_k vec(W_k · C_k)`, each product flattened row-major.
    pub fn project(&self, raw: &RawHyperState) -> Result<Vec<f64>> {
        if raw.tensors.len() != self.mats.len() {
            return Err(Error::mismatch(self.mats.len(), raw.tensors.len(), "hyper-state tensor count"));
        }
        let mut out = Vec::with_capacity(raw.tensors.iter().map(|w| w.rows() * self.d).sum());
        for (w, c) in raw.tensors.iter().zip(&self.mats) {
            if w.cols() != c.rows() {
                return Err(Error::mismatch(c.rows(), w.cols(), "projection rows vs tensor columns"));
            }
            out.extend_from_slice(w.matmul(c)?.data());
        }
        Ok(out)
    }

    /// Pulls `ds` back onto the projections: `dC_k = W_kᵀ · ds_k`.
    fn backprop(&self, raw: &RawHyperState, ds: &[f64], grads: &mut [Matrix]) -> Result<()> {
        let mut offset = 0;
        for ((w, c), g) in raw.tensors.iter().zip(&self.mats).zip(grads.iter_mut()) {
            let n = w.rows() * c.cols();
            let block = Matrix::from_vec(w.rows(), c.cols(), ds[offset..offset + n].to_vec())?;
            let dc = w.t_matmul(&block)?;
            for (gi, di) in g.data_mut().iter_mut().zip(dc.data()) {
                *gi += di;
            }
            offset += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Learned,
    /// φ and C keep their random initialization.
    RandomProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub projection_dim: usize,
    pub n_order: usize,
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub reservoir_size: usize,
    pub train_every: u64,
    pub mode: EncoderMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            projection_dim: 4,
            n_order: 2,
            beta_kl: 1e-3,
            learning_rate: 1e-3,
            batch_size: 8,
            reservoir_size: 256,
            train_every: 10,
            mode: EncoderMode::Learned,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.projection_dim == 0 || self.batch_size == 0 || self.reservoir_size == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.train_every == 0 {
            return Err(Error::Config("encoder train_every must be positive".into()));
        }
        if !(self.beta_kl >= 0.0 && self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("encoder beta_kl must be >= 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

/// True on steps where the encoder trains.
pub fn training_cadence(update_step: u64, every: u64) -> bool {
    every != 0 && update_step % every == 0
}

/// φ: s → s/4 → 2h (tanh, tanh). ω: h → s/4 → s (sigmoid, identity).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub phi: DenseNet,
    pub omega: DenseNet,
    latent: usize,
}

impl EncoderDecoder {
    pub fn new<R: Rng + ?Sized>(s_dim: usize, latent: usize, rng: &mut R) -> Result<Self> {
        let hidden = (s_dim / 4).max(1);
        let phi = DenseNet::with_rng(&[s_dim, hidden, 2 * latent], &[Activation::Tanh, Activation::Tanh], rng)?;
        let omega = DenseNet::with_rng(&[latent, hidden, s_dim], &[Activation::Sigmoid, Activation::Identity], rng)?;
        Self::from_nets(phi, omega)
    }

    pub fn from_nets(phi: DenseNet, omega: DenseNet) -> Result<Self> {
        if phi.output_dim() % 2 != 0 {
            return Err(Error::Sizing("encoder output must hold mean and log-std halves".into()));
        }
        let latent = phi.output_dim() / 2;
        if omega.input_dim() != latent || omega.output_dim() != phi.input_dim() {
            return Err(Error::Sizing("decoder shape does not mirror encoder".into()));
        }
        Ok(Self { phi, omega, latent })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    /// Posterior mean.
    pub fn embed(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.phi.predict(s)?;
        out.truncate(self.latent);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EncoderLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub phi: GradientSet,
    pub omega: GradientSet,
    pub projections: Vec<Matrix>,
}

impl EncoderGradients {
    pub fn zeros(vae: &EncoderDecoder, proj: &Projections) -> Self {
        Self {
            phi: GradientSet::zeros_like(&vae.phi),
            omega: GradientSet::zeros_like(&vae.omega),
            projections: proj.mats.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    fn zero(&mut self) {
        self.phi.zero();
        self.omega.zero();
        self.projections.iter_mut().for_each(|m| m.data_mut().fill(0.0));
    }

    fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.omega.is_finite() && self.projections.iter().all(Matrix::is_finite)
    }
}

/// Batch loss and exact gradients. `targets` are held constant; `noise`
/// supplies one standard-normal vector per sample for the
/// reparameterized latent.
pub fn loss_and_gradients(
    vae: &EncoderDecoder,
    proj: &Projections,
    raws: &[RawHyperState],
    targets: &[Vec<f64>],
    noise: &[Vec<f64>],
    beta_kl: f64,
) -> Result<(EncoderLoss, EncoderGradients)> {
    if raws.is_empty() || raws.len() != targets.len() || raws.len() != noise.len() {
        return Err(Error::mismatch(raws.len(), targets.len().min(noise.len()), "encoder batch"));
    }
    let mut grads = EncoderGradients::zeros(vae, proj);
    let loss = accumulate_loss_and_gradients(vae, proj, raws, targets, noise, beta_kl, &mut grads)?;
    Ok((loss, grads))
}

/// [`loss_and_gradients`] into a caller-owned gradient buffer, which must
/// start zeroed.
fn accumulate_loss_and_gradients(
    vae: &EncoderDecoder,
    proj: &Projections,
    raws: &[RawHyperState],
    targets: &[Vec<f64>],
    noise: &[Vec<f64>],
    beta_kl: f64,
    grads: &mut EncoderGradients,
) -> Result<EncoderLoss> {
    if raws.is_empty() || raws.len() != targets.len() || raws.len() != noise.len() {
        return Err(Error::mismatch(raws.len(), targets.len().min(noise.len()), "encoder batch"));
    }
    let h = vae.latent;
    let inv_b = 1.0 / raws.len() as f64;
    let mut loss = EncoderLoss::default();
    let mut states = Vec::with_capacity(raws.len());
    for ((raw, target), eps) in raws.iter().zip(targets).zip(noise) {
        if eps.len() != h {
            return Err(Error::mismatch(h, eps.len(), "encoder noise"));
        }
        let s = proj.project(raw)?;
        if target.len() != s.len() {
            return Err(Error::mismatch(s.len(), target.len(), "encoder target"));
        }
        states.push(s);
    }
    let (enc_outs, enc_caches) = vae.phi.forward_batch(&states)?;
    let mut zs = Vec::with_capacity(raws.len());
    let mut sigmas = Vec::with_capacity(raws.len());
    let mut clamps = Vec::with_capacity(raws.len());
    for (enc_out, eps) in enc_outs.iter().zip(noise) {
        let mut z = vec![0.0; h];
        let mut sigma = vec![0.0; h];
        let mut clamped = vec![false; h];
        for j in 0..h {
            let raw_ls = enc_out[h + j];
            let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            clamped[j] = ls != raw_ls;
            sigma[j] = ls.exp();
            z[j] = enc_out[j] + sigma[j] * eps[j];
            loss.kl += 0.5 * (enc_out[j] * enc_out[j] + sigma[j] * sigma[j] - 1.0 - 2.0 * ls) * inv_b;
        }
        zs.push(z);
        sigmas.push(sigma);
        clamps.push(clamped);
    }
    let (recons, dec_caches) = vae.omega.forward_batch(&zs)?;
    let mut d_recons = Vec::with_capacity(raws.len());
    for (recon, target) in recons.iter().zip(targets) {
        let mut d_recon = vec![0.0; recon.len()];
        for (i, (y, t)) in recon.iter().zip(target).enumerate() {
            let e = y - t;
            loss.reconstruction += e * e * inv_b;
            d_recon[i] = 2.0 * e * inv_b;
        }
        d_recons.push(d_recon);
    }
    let dzs = vae.omega.backward_batch_accumulate(&dec_caches, &d_recons, &mut grads.omega)?;
    let mut d_encs = Vec::with_capacity(raws.len());
    for (b, dz) in dzs.iter().enumerate() {
        let (enc_out, eps, sigma, clamped) = (&enc_outs[b], &noise[b], &sigmas[b], &clamps[b]);
        let mut d_enc = vec![0.0; 2 * h];
        for j in 0..h {
            d_enc[j] = dz[j] + beta_kl * enc_out[j] * inv_b;
            d_enc[h + j] = if clamped[j] {
                0.0
            } else {
                dz[j] * eps[j] * sigma[j] + beta_kl * (sigma[j] * sigma[j] - 1.0) * inv_b
            };
        }
        d_encs.push(d_enc);
    }
    let dss = vae.phi.backward_batch_accumulate(&enc_caches, &d_encs, &mut grads.phi)?;
    for (raw, ds) in raws.iter().zip(&dss) {
        proj.backprop(raw, ds, &mut grads.projections)?;
    }
    loss.total = loss.reconstruction + beta_kl * loss.kl;
    Ok(loss)
}

/// Uniform reservoir sample of every raw hyper-state offered so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    items: Vec<RawHyperState>,
    capacity: usize,
    seen: u64,
}

impl Reservoir {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Vec::with_capacity(capacity.min(1024)),
            capacity,
            seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn offer<R: Rng + ?Sized>(&mut self, item: RawHyperState, rng: &mut R) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = item;
            }
        }
    }

    /// `n` items drawn with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<RawHyperState> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.items[rng.gen_range(0..self.items.len())].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TrainReport {
    pub loss: EncoderLoss,
    pub skipped: bool,
}

/// Projections, VAE, optimizer state and training reservoir.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    proj: Projections,
    vae: EncoderDecoder,
    opt_phi: OptimizerState,
    opt_omega: OptimizerState,
    opt_proj: OptimizerState,
    reservoir: Reservoir,
    rng: StreamRng,
    /// Reused across train steps; the buffers are large enough that fresh
    /// allocations cost more than the arithmetic.
    scratch: Option<Box<EncoderGradients>>,
}

impl Encoder {
    /// `shapes` lists every raw tensor's (rows, cols) in block order.
    pub fn new(config: EncoderConfig, shapes: &[(usize, usize)], mut rng: StreamRng) -> Result<Self> {
        config.validate()?;
        let proj = Projections::new(shapes, config.projection_dim, &mut rng)?;
        let s_dim = Projections::output_dim(shapes, config.projection_dim);
        let vae = EncoderDecoder::new(s_dim, config.latent_dim, &mut rng)?;
        Ok(Self::assemble(config, proj, vae, rng))
    }

    fn assemble(config: EncoderConfig, proj: Projections, vae: EncoderDecoder, rng: StreamRng) -> Self {
        let adam = OptimizerKind::adam();
        let proj_sizes: Vec<usize> = proj.mats.iter().map(|m| m.data().len()).collect();
        Self {
            opt_phi: OptimizerState::for_net(adam, &vae.phi),
            opt_omega: OptimizerState::for_net(adam, &vae.omega),
            opt_proj: OptimizerState::new(adam, &proj_sizes),
            reservoir: Reservoir::new(config.reservoir_size),
            config,
            proj,
            vae,
            rng,
            scratch: None,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn projections(&self) -> &Projections {
        &self.proj
    }

    pub fn vae(&self) -> &EncoderDecoder {
        &self.vae
    }

    pub fn reservoir(&self) -> &Reservoir {
        &self.reservoir
    }

    pub fn state_dim(&self) -> usize {
        self.vae.input_dim()
    }

    pub fn key_dim(&self) -> usize {
        self.vae.latent_dim()
    }

    pub fn project(&self, raw: &RawHyperState) -> Result<Vec<f64>> {
        self.proj.project(raw)
    }

    pub fn embed(&self, raw: &RawHyperState) -> Result<Vec<f64>> {
        self.vae.embed(&self.proj.project(raw)?)
    }

    /// Adds a raw hyper-state to the training reservoir.
    pub fn observe(&mut self, raw: RawHyperState) {
        if self.config.mode == EncoderMode::Learned {
            self.reservoir.offer(raw, &mut self.rng);
        }
    }

    /// Trains once if `update_step` is on the cadence and the mode learns.
    pub fn maybe_train(&mut self, update_step: u64) -> Result<Option<TrainReport>> {
        if self.config.mode != EncoderMode::Learned
            || self.reservoir.is_empty()
            || !training_cadence(update_step, self.config.train_every)
        {
            return Ok(None);
        }
        let batch = self.reservoir.sample(self.config.batch_size, &mut self.rng);
        self.train_step(&batch).map(Some)
    }

    /// One Adam step on the VAE loss for `batch`.
    pub fn train_step(&mut self, batch: &[RawHyperState]) -> Result<TrainReport> {
        let targets = batch.iter().map(|r| self.proj.project(r)).collect::<Result<Vec<_>>>()?;
        let h = self.vae.latent;
        let noise: Vec<Vec<f64>> = (0..batch.len())
            .map(|_| (0..h).map(|_| self.rng.sample(StandardNormal)).collect())
            .collect();
        let mut grads = match self.scratch.take() {
            Some(mut g) => {
                g.zero();
                g
            }
            None => Box::new(EncoderGradients::zeros(&self.vae, &self.proj)),
        };
        let (vae, proj, beta_kl) = (&self.vae, &self.proj, self.config.beta_kl);
        let loss = accumulate_loss_and_gradients(vae, proj, batch, &targets, &noise, beta_kl, &mut grads);
        let report = loss.and_then(|loss| {
            if !(loss.total.is_finite() && grads.is_finite()) {
                return Ok(TrainReport { loss, skipped: true });
            }
            // Gradients are finite, shapes congruent and lr validated, so
            // none of these steps can fail halfway.
            let lr = self.config.learning_rate;
            self.vae.phi.apply_update(&grads.phi, &mut self.opt_phi, lr)?;
            self.vae.omega.apply_update(&grads.omega, &mut self.opt_omega, lr)?;
            let mut params: Vec<&mut [f64]> = self.proj.mats.iter_mut().map(|m| m.data_mut()).collect();
            let g: Vec<&[f64]> = grads.projections.iter().map(|m| m.data()).collect();
            self.opt_proj.step(&mut params, &g, lr)?;
            Ok(TrainReport { loss, skipped: false })
        });
        self.scratch = Some(grads);
        report
    }

    /// Reconstruction loss of `batch` through the posterior mean, without
    /// sampling. Used for monitoring.
    pub fn reconstruction_loss(&self, batch: &[RawHyperState]) -> Result<f64> {
        let mut total = 0.0;
        for raw in batch {
            let s = self.proj.project(raw)?;
            let recon = self.vae.omega.predict(&self.vae.embed(&s)?)?;
            total += recon.iter().zip(&s).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Serializes projections and both networks (not optimizer state or
    /// the reservoir):
    ///
    /// ```text
    /// magic "EPGTENC\0", version u32, beta_kl f64, projection count u32,
    /// projection matrix records, φ network record, ω network record
    /// ```
    pub fn snapshot(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(Vec::new());
        let put = |w: &mut ByteWriter<Vec<u8>>| -> Result<()> {
            w.bytes(SNAPSHOT_MAGIC)?;
            w.u32(SNAPSHOT_VERSION)?;
            w.f64(self.config.beta_kl)?;
            w.u32(self.proj.mats.len() as u32)?;
            for m in &self.proj.mats {
                write_matrix(w, m)?;
            }
            write_net_record(w, &self.vae.phi)?;
            write_net_record(w, &self.vae.omega)
        };
        put(&mut w).expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    /// Rebuilds an encoder from a snapshot. Training state starts fresh.
    pub fn restore(bytes: &[u8], config: EncoderConfig, rng: StreamRng) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if &r.exact::<8>()? != SNAPSHOT_MAGIC {
            return Err(Error::Corrupt("not an encoder snapshot".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Version {
                expected: SNAPSHOT_VERSION,
                found: version,
            });
        }
        let beta_kl = r.f64()?;
        let count = r.u32()?;
        if count == 0 || count > 4096 {
            return Err(Error::Corrupt(format!("implausible projection count {count}")));
        }
        let mats = (0..count).map(|_| read_matrix(&mut r)).collect::<Result<Vec<_>>>()?;
        let phi = read_net_record(&mut r)?;
        let omega = read_net_record(&mut r)?;
        r.finish()?;
        let proj = Projections::from_matrices(mats).map_err(|e| Error::Corrupt(e.to_string()))?;
        let vae = EncoderDecoder::from_nets(phi, omega).map_err(|e| Error::Corrupt(e.to_string()))?;
        let expected: usize = proj.mats.iter().map(|m| m.cols()).sum::<usize>();
        if expected == 0 {
            return Err(Error::Corrupt("empty projections".into()));
        }
        let config = EncoderConfig {
            beta_kl,
            latent_dim: vae.latent,
            projection_dim: proj.d,
            ..config
        };
        Ok(Self::assemble(config, proj, vae, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_raw(shapes: &[(usize, usize)], rng: &mut impl Rng) -> RawHyperState {
        RawHyperState {
            tensors: shapes
                .iter()
                .map(|&(r, c)| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect(),
        }
    }

    #[test]
    fn hand_projection() {
        let p = Projections::from_matrices(vec![Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap()]).unwrap();
        let raw = RawHyperState {
            tensors: vec![Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap()],
        };
        assert_eq!(p.project(&raw).unwrap(), vec![11.0]);
    }

    #[test]
    fn projection_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shapes = [(4, 8), (3, 4)];
        let p = Projections::new(&shapes, 2, &mut rng).unwrap();
        assert_eq!(p.matrices()[0].rows(), 8);
        let raw = random_raw(&shapes, &mut rng);
        assert_eq!(p.project(&raw).unwrap().len(), 14);
        let wrong = random_raw(&[(4, 7), (3, 4)], &mut rng);
        assert!(p.project(&wrong).is_err());
    }

    #[test]
    fn cadence() {
        assert!(training_cadence(10, 10));
        assert!(!training_cadence(7, 10));
        assert!(training_cadence(0, 10));
    }

    #[test]
    fn embed_is_deterministic_and_sized() {
        let shapes = [(16, 4), (2, 16)];
        let enc = Encoder::new(EncoderConfig::default(), &shapes, stream(3, Stream::Encoder)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = random_raw(&shapes, &mut rng);
        let a = enc.embed(&raw).unwrap();
        assert_eq!(a, enc.embed(&raw).unwrap());
        assert_eq!(a.len(), 32);
    }

    #[test]
    fn training_reduces_reconstruction() {
        let shapes = [(8, 4), (2, 8)];
        let mut enc = Encoder::new(EncoderConfig::default(), &shapes, stream(9, Stream::Encoder)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pool: Vec<_> = (0..32).map(|_| random_raw(&shapes, &mut rng)).collect();
        let before = enc.reconstruction_loss(&pool).unwrap();
        for _ in 0..200 {
            let batch: Vec<_> = (0..8).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect();
            assert!(!enc.train_step(&batch).unwrap().skipped);
        }
        assert!(enc.reconstruction_loss(&pool).unwrap() < before);
    }

    #[test]
    fn random_projection_mode_never_trains() {
        let shapes = [(4, 4)];
        let cfg = EncoderConfig {
            mode: EncoderMode::RandomProjection,
            ..EncoderConfig::default()
        };
        let mut enc = Encoder::new(cfg, &shapes, stream(1, Stream::Encoder)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        enc.observe(random_raw(&shapes, &mut rng));
        assert!(enc.maybe_train(0).unwrap().is_none());
        assert!(enc.reservoir().is_empty());
    }

    #[test]
    fn reservoir_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut res = Reservoir::new(5);
        for _ in 0..50 {
            res.offer(random_raw(&[(1, 1)], &mut rng), &mut rng);
        }
        assert_eq!(res.len(), 5);
        assert_eq!(res.seen(), 50);
        assert_eq!(res.sample(8, &mut rng).len(), 8);
    }

    #[test]
    fn snapshot_round_trip() {
        let shapes = [(6, 3), (2, 6)];
        let enc = Encoder::new(EncoderConfig::default(), &shapes, stream(5, Stream::Encoder)).unwrap();
        let back = Encoder::restore(&enc.snapshot(), EncoderConfig::default(), stream(5, Stream::Encoder)).unwrap();
        assert_eq!(enc.vae(), back.vae());
        assert_eq!(enc.projections(), back.projections());
        let bytes = enc.snapshot();
        assert!(Encoder::restore(&bytes[..bytes.len() - 2], EncoderConfig::default(), stream(5, Stream::Encoder)).is_err());
    }
}
