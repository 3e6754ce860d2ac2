//! Multilayer perceptrons with hand-derived reverse-mode gradients.
//!
//! Each layer computes `dropout(batchnorm(act(x·Wᵀ + b)))`, with batch-norm
//! and dropout optional per layer. Train-mode batch-norm normalizes with the
//! biased batch variance and its backward pass differentiates through the
//! batch statistics; running statistics use the unbiased variance. Dropout is
//! inverted: kept units are scaled by `1/(1-p)` at train time.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::Rng;
use crate::{Error, Result};

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            shift: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        }
    }
}

/// One dense layer with its optional normalization and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub batch_norm: Option<BatchNorm>,
    pub dropout: f64,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        batch_norm: bool,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, data).expect("sized above"),
            bias: vec![0.0; out_dim],
            activation,
            batch_norm: batch_norm.then(|| BatchNorm::new(out_dim)),
            dropout,
        }
    }

    fn num_params(&self) -> usize {
        self.weight.data().len()
            + self.bias.len()
            + self.batch_norm.as_ref().map_or(0, |bn| 2 * bn.gamma.len())
    }
}

/// Architecture of an MLP: hidden layers use ReLU, then optional batch-norm
/// and dropout; the output layer is linear and bare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths..., output width.
    pub widths: Vec<usize>,
    pub batch_norm: bool,
    pub dropout: f64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self {
            widths,
            batch_norm: false,
            dropout: 0.0,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    /// Weights and biases only; batch-norm affine parameters are excluded.
    pub fn weight_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

#[derive(Clone, Debug)]
struct BnCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Matrix,
    pre_activation: Matrix,
    bn: Option<BnCache>,
    dropout_mask: Option<Vec<f64>>,
}

/// Intermediates of a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    layers: Vec<LayerCache>,
    batch: usize,
}

impl MlpCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Gradients laid out like the parameters of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weight: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
    pub gamma: Vec<Option<Vec<f64>>>,
    pub shift: Vec<Option<Vec<f64>>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let mut g = Self {
            weight: vec![],
            bias: vec![],
            gamma: vec![],
            shift: vec![],
        };
        for l in &mlp.layers {
            g.weight.push(Matrix::zeros(l.out_dim(), l.in_dim()));
            g.bias.push(vec![0.0; l.out_dim()]);
            let bn = l.batch_norm.as_ref().map(|bn| vec![0.0; bn.gamma.len()]);
            g.gamma.push(bn.clone());
            g.shift.push(bn);
        }
        g
    }

    /// Slices in the same order as [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for i in 0..self.weight.len() {
            out.push(self.weight[i].data());
            out.push(self.bias[i].as_slice());
            if let (Some(g), Some(s)) = (&self.gamma[i], &self.shift[i]) {
                out.push(g.as_slice());
                out.push(s.as_slice());
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (((w, b), g), s) in self
            .weight
            .iter_mut()
            .zip(self.bias.iter_mut())
            .zip(self.gamma.iter_mut())
            .zip(self.shift.iter_mut())
        {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
            if let (Some(g), Some(s)) = (g, s) {
                out.push(g.as_mut_slice());
                out.push(s.as_mut_slice());
            }
        }
        out
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Mlp {
    pub fn new(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!(
                "mlp widths {:?} need at least input and output, all positive",
                spec.widths
            )));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} outside [0, 1)",
                spec.dropout
            )));
        }
        let n = spec.widths.len() - 1;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i + 1 == n {
                    Layer::glorot(w[0], w[1], Activation::Linear, false, 0.0, rng)
                } else {
                    Layer::glorot(
                        w[0],
                        w[1],
                        Activation::Relu,
                        spec.batch_norm,
                        spec.dropout,
                        rng,
                    )
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Wraps explicit layers after checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(format!("layer {i}: bias length")));
            }
            if let Some(bn) = &l.batch_norm {
                let w = l.out_dim();
                if bn.gamma.len() != w
                    || bn.shift.len() != w
                    || bn.running_mean.len() != w
                    || bn.running_var.len() != w
                {
                    return Err(Error::shape(format!("layer {i}: batch-norm widths")));
                }
                if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::invalid(format!(
                        "layer {i}: running variance must be positive"
                    )));
                }
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::invalid(format!("layer {i}: dropout {}", l.dropout)));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
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
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm.is_some())
    }

    /// Mutable parameter tensors: per layer weight, bias, then batch-norm scale and shift.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
            if let Some(bn) = &mut l.batch_norm {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.shift.as_mut_slice());
            }
        }
        out
    }

    pub fn param_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.data().len());
            out.push(l.bias.len());
            if let Some(bn) = &l.batch_norm {
                out.push(bn.gamma.len());
                out.push(bn.shift.len());
            }
        }
        out
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp expects {} input columns, got {}",
                self.input_dim(),
                batch.cols()
            )));
        }
        if batch.rows() == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// Eval-mode forward: no dropout, batch-norm uses running statistics.
    /// A pure function of `(self, batch)`.
    pub fn forward_eval(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut h = affine(&x, layer)?;
            if layer.activation == Activation::Relu {
                relu_in_place(&mut h);
            }
            if let Some(bn) = &layer.batch_norm {
                let cols = h.cols();
                let scale: Vec<f64> = (0..cols)
                    .map(|j| bn.gamma[j] / (bn.running_var[j] + bn.eps).sqrt())
                    .collect();
                for r in 0..h.rows() {
                    for (j, v) in h.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - bn.running_mean[j]) * scale[j] + bn.shift[j];
                    }
                }
            }
            x = h;
        }
        x.ensure_finite("mlp output")?;
        Ok(x)
    }

    /// Train-mode forward. Samples dropout masks from `rng`, normalizes with
    /// batch statistics and updates running statistics.
    pub fn forward_train(&mut self, batch: &Matrix, rng: &mut Rng) -> Result<(Matrix, MlpCache)> {
        self.check_input(batch)?;
        let b = batch.rows();
        if b < 2 && self.has_batch_norm() {
            return Err(Error::shape(
                "train-mode batch-norm needs a batch of at least 2 rows",
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &mut self.layers {
            let pre = affine(&x, layer)?;
            let mut h = pre.clone();
            if layer.activation == Activation::Relu {
                relu_in_place(&mut h);
            }
            let bn_cache = match &mut layer.batch_norm {
                Some(bn) => Some(batch_norm_train(&mut h, bn)),
                None => None,
            };
            let dropout_mask = if layer.dropout > 0.0 {
                let keep = 1.0 - layer.dropout;
                let mask: Vec<f64> = (0..h.data().len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (v, m) in h.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            } else {
                None
            };
            caches.push(LayerCache {
                input: std::mem::replace(&mut x, h),
                pre_activation: pre,
                bn: bn_cache,
                dropout_mask,
            });
        }
        x.ensure_finite("mlp output")?;
        Ok((
            x,
            MlpCache {
                layers: caches,
                batch: b,
            },
        ))
    }

    /// Dispatches on `mode`; eval mode returns no cache.
    pub fn forward(
        &mut self,
        batch: &Matrix,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Matrix, Option<MlpCache>)> {
        match mode {
            Mode::Train => self.forward_train(batch, rng).map(|(y, c)| (y, Some(c))),
            Mode::Eval => self.forward_eval(batch).map(|y| (y, None)),
        }
    }

    /// Reverse pass for `Σ_batch ⟨output_grad, output⟩`: returns parameter
    /// gradients and the gradient with respect to the input batch.
    pub fn backward(&self, cache: &MlpCache, output_grad: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::shape("cache was produced by a different network"));
        }
        if output_grad.shape() != (cache.batch, self.output_dim()) {
            return Err(Error::shape(format!(
                "output grad {:?}, expected ({}, {})",
                output_grad.shape(),
                cache.batch,
                self.output_dim()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = output_grad.clone();
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            if let Some(mask) = &lc.dropout_mask {
                for (v, m) in g.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            if let (Some(bn), Some(bc)) = (&layer.batch_norm, &lc.bn) {
                let (dgamma, dshift) = batch_norm_backward(&mut g, bn, bc);
                grads.gamma[i] = Some(dgamma);
                grads.shift[i] = Some(dshift);
            }
            if layer.activation == Activation::Relu {
                for (v, p) in g.data_mut().iter_mut().zip(lc.pre_activation.data()) {
                    if *p <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            grads.weight[i] = g.t_matmul(&lc.input)?;
            grads.bias[i] = g.sum_rows();
            g = g.matmul(&layer.weight)?;
        }
        Ok((grads, g))
    }
}

fn affine(x: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut h = x.matmul_t(&layer.weight)?;
    for r in 0..h.rows() {
        for (v, b) in h.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(h)
}

fn relu_in_place(h: &mut Matrix) {
    for v in h.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn batch_norm_train(h: &mut Matrix, bn: &mut BatchNorm) -> BnCache {
    let (b, cols) = h.shape();
    let n = b as f64;
    let mean: Vec<f64> = h.sum_rows().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; cols];
    for row in h.iter_rows() {
        for j in 0..cols {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut x_hat = Matrix::zeros(b, cols);
    for r in 0..b {
        let xh = x_hat.row_mut(r);
        let hr = &mut h.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            xh[j] = (hr[j] - mean[j]) * inv_std[j];
            hr[j] = bn.gamma[j] * xh[j] + bn.shift[j];
        }
    }
    let unbias = n / (n - 1.0);
    for j in 0..cols {
        bn.running_mean[j] = (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean[j];
        bn.running_var[j] =
            (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * var[j] * unbias;
    }
    BnCache { x_hat, inv_std }
}

/// Replaces `g` (gradient wrt the normalized output) with the gradient wrt
/// the batch-norm input; returns `(dγ, dshift)`.
fn batch_norm_backward(g: &mut Matrix, bn: &BatchNorm, cache: &BnCache) -> (Vec<f64>, Vec<f64>) {
    let (b, cols) = g.shape();
    let n = b as f64;
    let mut dgamma = vec![0.0; cols];
    let mut dshift = vec![0.0; cols];
    for r in 0..b {
        let gr = g.row(r);
        let xr = cache.x_hat.row(r);
        for j in 0..cols {
            dgamma[j] += gr[j] * xr[j];
            dshift[j] += gr[j];
        }
    }
    // dx̂ = g·γ; Σdx̂ = γ·dshift; Σ dx̂·x̂ = γ·dγ
    for r in 0..b {
        let xr = cache.x_hat.row(r).to_vec();
        let gr = g.row_mut(r);
        for j in 0..cols {
            let dxh = gr[j] * bn.gamma[j];
            gr[j] = cache.inv_std[j] / n
                * (n * dxh - bn.gamma[j] * dshift[j] - xr[j] * bn.gamma[j] * dgamma[j]);
        }
    }
    (dgamma, dshift)
}
