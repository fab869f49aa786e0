use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{param_err, shape_err, PclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Fully connected network; the last layer emits logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

/// Activations and pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }

    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients for every weight and bias of a [`DenseNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.data_mut().iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flattened in the same order as [`DenseNetwork::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl DenseNetwork {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(param_err!("network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(shape_err!(
                    "layer {k}: bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.out_dim()
                ));
            }
            if !l.weights.is_finite() || !l.bias.iter().all(|v| v.is_finite()) {
                return Err(param_err!("layer {k}: non-finite parameters"));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape_err!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(param_err!("final layer must use the identity activation"));
        }
        Ok(Self { layers })
    }

    /// Relu MLP with layer widths `sizes` (`sizes[0]` inputs, last = classes).
    ///
    /// Relu layers use He-normal weights, the logit layer uniform
    /// `+-1/sqrt(in)`. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(param_err!("layer sizes {sizes:?} must have >= 2 positive entries"));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
                let activation = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let data: Vec<f64> = match activation {
                    Activation::Relu => {
                        let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                        (0..fan_in * fan_out).map(|_| d.sample(rng)).collect()
                    }
                    Activation::Identity => {
                        let b = 1.0 / (fan_in as f64).sqrt();
                        let d = Uniform::new(-b, b).unwrap();
                        (0..fan_in * fan_out).map(|_| d.sample(rng)).collect()
                    }
                };
                DenseLayer {
                    weights: Matrix::from_vec(fan_out, fan_in, data).unwrap(),
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.bias.len()).sum()
    }

    /// All parameters flattened layer by layer (weights row-major, then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape_err!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(shape_err!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            ));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers {
            let z = affine(activations.last().unwrap(), layer);
            let a = match layer.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => {
                    let mut a = z.clone();
                    a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    a
                }
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let logits = activations.last().unwrap().clone();
        Ok((
            logits,
            ForwardCache {
                activations,
                pre_activations,
            },
        ))
    }

    /// Logits only.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(shape_err!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            ));
        }
        let mut a = x.clone();
        for layer in &self.layers {
            let mut z = affine(&a, layer);
            if layer.activation == Activation::Relu {
                z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<(ParamGrads, Matrix)> {
        let n = self.layers.len();
        if cache.pre_activations.len() != n || cache.activations.len() != n + 1 {
            return Err(shape_err!("forward cache was built for a different network"));
        }
        if grad_logits.shape() != cache.activations[n].shape() {
            return Err(shape_err!(
                "gradient {:?} does not match cached logits {:?}",
                grad_logits.shape(),
                cache.activations[n].shape()
            ));
        }
        let mut layer_grads = Vec::with_capacity(n);
        let mut delta = grad_logits.clone();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            if layer.activation == Activation::Relu {
                for (d, z) in delta.data_mut().iter_mut().zip(cache.pre_activations[k].data()) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &cache.activations[k];
            layer_grads.push(LayerGrads {
                weights: transpose_mul(&delta, input),
                bias: column_sums(&delta),
            });
            delta = mul(&delta, &layer.weights);
        }
        layer_grads.reverse();
        Ok((ParamGrads { layers: layer_grads }, delta))
    }

    /// `theta <- theta - lr * grad`
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(param_err!("learning rate must be positive, got {lr}"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(shape_err!("gradient has {} layers", grads.layers.len()));
        }
        if !grads.is_finite() {
            return Err(PclError::Training {
                task: 0,
                step: 0,
                reason: "non-finite gradient".into(),
            });
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            if l.weights.shape() != g.weights.shape() || l.bias.len() != g.bias.len() {
                return Err(shape_err!("gradient shape does not match layer"));
            }
            for (w, d) in l.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w -= lr * d;
            }
            for (b, d) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
        Ok(())
    }
}

/// `x W^T + b`
fn affine(x: &Matrix, layer: &DenseLayer) -> Matrix {
    let (rows, out) = (x.rows(), layer.out_dim());
    let mut z = Matrix::zeros(rows, out);
    for r in 0..rows {
        let xr = x.row(r);
        let zr = z.row_mut(r);
        for (o, zo) in zr.iter_mut().enumerate() {
            *zo = dot(xr, layer.weights.row(o)) + layer.bias[o];
        }
    }
    z
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a^T b` for `a: n x p`, `b: n x q`.
fn transpose_mul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &ai) in ar.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (o, bj) in out.row_mut(i).iter_mut().zip(br) {
                *o += ai * bj;
            }
        }
    }
    out
}

/// `a b` for `a: n x p`, `b: p x q`.
fn mul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let or = out.row_mut(r);
        for (k, &ak) in ar.iter().enumerate() {
            if ak == 0.0 {
                continue;
            }
            for (o, bk) in or.iter_mut().zip(b.row(k)) {
                *o += ak * bk;
            }
        }
    }
    out
}

fn column_sums(a: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; a.cols()];
    for r in a.iter_rows() {
        for (si, v) in s.iter_mut().zip(r) {
            *si += v;
        }
    }
    s
}
