//! Minimal dense-network engine.
//!
//! Networks are stacks of affine layers, each followed by an element-wise
//! activation. Weights are stored row-major with shape `(out, in)` so a layer
//! computes `y = act(W x + b)`. Gradients are exact reverse-mode derivatives;
//! everything is `f64`.

pub mod codec;
mod optim;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::{Error, Result};

pub use optim::{OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            _ => return None,
        })
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::mismatch(rows * cols, data.len(), "matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::mismatch(self.cols, other.rows, "matmul inner dimension"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::mismatch(self.rows, other.rows, "transposed matmul rows"));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let rhs = other.row(k);
            for (c, &a) in self.row(k).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, rhs, out.row_mut(c));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::Sizing("layer dimensions must be positive".into()));
        }
        if bias.len() != weights.rows() {
            return Err(Error::mismatch(weights.rows(), bias.len(), "bias length"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Activations recorded by [`DenseNet::forward`]; `activations[0]` is the
/// input and `activations[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        self.activations.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Per-layer gradients, shape-congruent with the network they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// Resets every entry to zero, keeping the allocation.
    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.data_mut().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for l in &mut self.layers {
            l.weights.scale(a);
            l.bias.iter_mut().for_each(|x| *x *= a);
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::mismatch(self.layers.len(), other.layers.len(), "gradient layers"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.data().len() != b.weights.data().len() || a.bias.len() != b.bias.len() {
                return Err(Error::mismatch(a.weights.data().len(), b.weights.data().len(), "gradient shape"));
            }
            axpy(1.0, b.weights.data(), a.weights.data_mut());
            axpy(1.0, &b.bias, &mut a.bias);
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|x| x == 0.0)
    }

    /// All entries, layer by layer, weights before bias.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.iter()).copied())
    }

    pub fn weight_matrices(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.weights.clone()).collect()
    }

    fn congruent(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.rows() == l.out_dim()
                    && g.weights.cols() == l.in_dim()
                    && g.bias.len() == l.out_dim()
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases. `sizes` lists node counts, so
    /// `[4, 8, 2]` is two layers with weight shapes `8×4` and `2×8`.
    pub fn new(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut rng = <StreamRng as rand::SeedableRng>::seed_from_u64(seed);
        Self::with_rng(sizes, activations, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Sizing("need at least one layer (two sizes)".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Sizing("layer sizes must be positive".into()));
        }
        if activations.len() != sizes.len() - 1 {
            return Err(Error::Sizing(format!(
                "{} activations for {} layers",
                activations.len(),
                sizes.len() - 1
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Layer {
                    weights: Matrix {
                        rows: fan_out,
                        cols: fan_in,
                        data,
                    },
                    bias: vec![0.0; fan_out],
                    activation: act,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Sizing("empty layer list".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::mismatch(pair[0].out_dim(), pair[1].in_dim(), "adjacent layers"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data.len() + l.bias.len()).sum()
    }

    pub fn weight_matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().map(|l| &l.weights)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn layer_forward(layer: &Layer, x: &[f64]) -> Vec<f64> {
        (0..layer.out_dim())
            .map(|r| layer.activation.apply(dot(layer.weights.row(r), x) + layer.bias[r]))
            .collect()
    }

    /// Output only, no cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::mismatch(self.input_dim(), input.len(), "network input"));
        }
        let mut x = Self::layer_forward(&self.layers[0], input);
        for layer in &self.layers[1..] {
            x = Self::layer_forward(layer, &x);
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::mismatch(self.input_dim(), input.len(), "network input"));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, activations.last().unwrap());
            activations.push(next);
        }
        let out = activations.last().unwrap().clone();
        Ok((out, ForwardCache { activations }))
    }

    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(GradientSet, Vec<f64>)> {
        let mut grads = GradientSet::zeros_like(self);
        let input_grad = self.backward_accumulate(cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Adds this sample's gradient into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut GradientSet,
    ) -> Result<Vec<f64>> {
        let n = self.layers.len();
        self.check_backward(cache, output_grad, grads)?;

        let mut delta: Vec<f64> = output_grad.to_vec();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let y = &cache.activations[l + 1];
            for (d, &yj) in delta.iter_mut().zip(y) {
                *d *= layer.activation.derivative_from_output(yj);
            }
            let x = &cache.activations[l];
            let g = &mut grads.layers[l];
            for (r, &dr) in delta.iter().enumerate() {
                if dr != 0.0 {
                    axpy(dr, x, g.weights.row_mut(r));
                }
                g.bias[r] += dr;
            }
            let mut prev = vec![0.0; layer.in_dim()];
            for (r, &dr) in delta.iter().enumerate() {
                if dr != 0.0 {
                    axpy(dr, layer.weights.row(r), &mut prev);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    fn check_backward(&self, cache: &ForwardCache, output_grad: &[f64], grads: &GradientSet) -> Result<()> {
        let n = self.layers.len();
        if cache.activations.len() != n + 1
            || cache
                .activations
                .iter()
                .zip(std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::out_dim)))
                .any(|(a, d)| a.len() != d)
        {
            return Err(Error::Sizing("forward cache does not belong to this network".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::mismatch(self.output_dim(), output_grad.len(), "output gradient"));
        }
        if !grads.congruent(self) {
            return Err(Error::Sizing("gradient set not congruent with network".into()));
        }
        Ok(())
    }

    /// Forward pass over a batch. Same results as calling [`Self::forward`]
    /// per sample, but each weight row is read once for the whole batch.
    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<ForwardCache>)> {
        if let Some(x) = inputs.iter().find(|x| x.len() != self.input_dim()) {
            return Err(Error::mismatch(self.input_dim(), x.len(), "network input"));
        }
        let mut caches: Vec<ForwardCache> = inputs
            .iter()
            .map(|x| {
                let mut activations = Vec::with_capacity(self.layers.len() + 1);
                activations.push(x.clone());
                ForwardCache { activations }
            })
            .collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![vec![0.0; layer.out_dim()]; caches.len()];
            for r in 0..layer.out_dim() {
                let row = layer.weights.row(r);
                for (c, y) in caches.iter().zip(next.iter_mut()) {
                    y[r] = layer.activation.apply(dot(row, &c.activations[l]) + layer.bias[r]);
                }
            }
            for (c, y) in caches.iter_mut().zip(next) {
                c.activations.push(y);
            }
        }
        let outs = caches.iter().map(|c| c.activations.last().unwrap().clone()).collect();
        Ok((outs, caches))
    }

    /// Batched [`Self::backward_accumulate`]; accumulation order over samples
    /// matches the per-sample loop.
    pub fn backward_batch_accumulate(
        &self,
        caches: &[ForwardCache],
        output_grads: &[Vec<f64>],
        grads: &mut GradientSet,
    ) -> Result<Vec<Vec<f64>>> {
        if caches.len() != output_grads.len() {
            return Err(Error::mismatch(caches.len(), output_grads.len(), "batch output gradients"));
        }
        for (c, g) in caches.iter().zip(output_grads) {
            self.check_backward(c, g, grads)?;
        }
        let mut deltas: Vec<Vec<f64>> = output_grads.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            for (delta, c) in deltas.iter_mut().zip(caches) {
                for (d, &yj) in delta.iter_mut().zip(&c.activations[l + 1]) {
                    *d *= layer.activation.derivative_from_output(yj);
                }
            }
            let g = &mut grads.layers[l];
            let mut prevs = vec![vec![0.0; layer.in_dim()]; caches.len()];
            for r in 0..layer.out_dim() {
                let w = layer.weights.row(r);
                let gr = g.weights.row_mut(r);
                for ((delta, c), prev) in deltas.iter().zip(caches).zip(prevs.iter_mut()) {
                    let dr = delta[r];
                    if dr != 0.0 {
                        axpy(dr, &c.activations[l], gr);
                        axpy(dr, w, prev);
                    }
                    g.bias[r] += dr;
                }
            }
            deltas = prevs;
        }
        Ok(deltas)
    }

    /// Applies one optimizer step. Non-finite gradients are rejected and the
    /// network is left untouched.
    pub fn apply_update(&mut self, grads: &GradientSet, opt: &mut OptimizerState, lr: f64) -> Result<()> {
        if !grads.congruent(self) {
            return Err(Error::Sizing("gradient set not congruent with network".into()));
        }
        // The optimizer rejects non-finite gradients before touching anything.
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            params.push(l.weights.data.as_mut_slice());
            params.push(l.bias.as_mut_slice());
        }
        let g: Vec<&[f64]> = grads
            .layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect();
        opt.step(&mut params, &g, lr)
    }

    /// Tensor sizes in optimizer order (weights then bias, per layer).
    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data.len(), l.bias.len()])
            .collect()
    }

    /// Mutable access to every scalar parameter, in [`GradientSet::iter`] order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.data.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data.iter().chain(l.bias.iter()).copied())
    }
}
