//! Dense feed-forward networks with per-example dropout masks.
//!
//! Layer weights are stored `fan_in x fan_out`, so a batch `X` (one example
//! per row) maps to `X·W + b`. Dropout is applied to the activations of a
//! layer, not to its weights: masking unit `j` of layer `l` zeroes the `j`-th
//! column of `W_l` for that example, which is the same thinned network as
//! masking the weight rows feeding unit `j`.
//!
//! Masks use inverted dropout: a kept unit is scaled by `1 / keep_prob`, so
//! the expected masked activation equals the unmasked one.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Glorot/Xavier uniform initialization on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "xavier_init needs non-zero fan dimensions, got {fan_in}x{fan_out}"
        )));
    }
    let bound = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-bound, bound)
        .map_err(|e| Error::invalid(format!("xavier bound {bound}: {e}")))?;
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Matrix::new(fan_in, fan_out, data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.cols() != bias.len() {
            return Err(Error::invalid(format!(
                "layer weights have {} outputs but bias has {}",
                weights.cols(),
                bias.len()
            )));
        }
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::invalid("layer with a zero dimension"));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    /// Xavier weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = xavier_init(fan_in, fan_out, rng)?;
        DenseLayer::new(weights, vec![0.0; fan_out], activation)
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Result<Self> {
        DenseLayer::new(Matrix::zeros(fan_in, fan_out), vec![0.0; fan_out], activation)
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
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

/// Binary per-unit mask for one example.
///
/// `layers[l]` masks the output of layer `l` of the network it is applied
/// to; a mask may cover fewer layers than the network has, in which case the
/// remaining layers (typically the output layer) run unmasked.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep_prob: f64,
    pub layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn ones(widths: &[usize]) -> Self {
        DropoutMask {
            keep_prob: 1.0,
            layers: widths.iter().map(|&w| vec![true; w]).collect(),
        }
    }

    /// Independent Bernoulli(`keep_prob`) entries for each width.
    pub fn sample<R: Rng + ?Sized>(keep_prob: f64, widths: &[usize], rng: &mut R) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::invalid(format!(
                "keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        let layers = widths
            .iter()
            .map(|&w| (0..w).map(|_| rng.random::<f64>() < keep_prob).collect())
            .collect();
        Ok(DropoutMask { keep_prob, layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }
}

/// Values retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    scales: Vec<Option<Matrix>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Pre-activation of the output layer.
    pub fn output_logits(&self) -> &Matrix {
        &self.pre[self.pre.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter-shaped container; used for gradients and Adam moments alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.shape() == l.weights.shape() && g.bias.len() == l.bias.len()
            })
    }

    /// Flat view in parameter order: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.as_slice().iter().chain(&g.bias).copied())
            .collect()
    }
}

/// Result of back-propagating one batch.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Gradients,
    /// Gradient of the loss with respect to the network input.
    pub input: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DenseLayer>", into = "Vec<DenseLayer>")]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl TryFrom<Vec<DenseLayer>> for Mlp {
    type Error = Error;

    fn try_from(layers: Vec<DenseLayer>) -> Result<Self> {
        Mlp::new(layers)
    }
}

impl From<Mlp> for Vec<DenseLayer> {
    fn from(net: Mlp) -> Self {
        net.layers
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::invalid(format!(
                    "layer {l} emits {} units but layer {} expects {}",
                    pair[0].fan_out(),
                    l + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Xavier-initialized stack: every layer but the last uses `hidden`, the
    /// last uses `output`. `widths` lists layer output widths in order.
    pub fn xavier<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(input_dim, widths, hidden, output, |i, o, a| {
            DenseLayer::xavier(i, o, a, rng)
        })
    }

    /// Same shape as [`Mlp::xavier`] with every parameter zero.
    pub fn zeros(input_dim: usize, widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        Self::build(input_dim, widths, hidden, output, DenseLayer::zeros)
    }

    fn build(
        input_dim: usize,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        mut make: impl FnMut(usize, usize, Activation) -> Result<DenseLayer>,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for (l, &w) in widths.iter().enumerate() {
            let act = if l + 1 == widths.len() { output } else { hidden };
            layers.push(make(fan_in, w, act)?);
            fan_in = w;
        }
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Output width of every layer.
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::fan_out).collect()
    }

    /// Widths of the hidden layers (all but the output layer).
    pub fn hidden_widths(&self) -> Vec<usize> {
        let w = self.widths();
        w[..w.len() - 1].to_vec()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in() * l.fan_out() + l.fan_out()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    /// Mutable access to the `index`-th parameter in [`Mlp::params_flat`] order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for layer in &mut self.layers {
            let nw = layer.weights.as_slice().len();
            if index < nw {
                return Some(&mut layer.weights.as_mut_slice()[index]);
            }
            index -= nw;
            if index < layer.bias.len() {
                return Some(&mut layer.bias[index]);
            }
            index -= layer.bias.len();
        }
        None
    }

    /// Maskless forward pass without a cache.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            let (_, h) = affine_activate(layer, &a)?;
            a = h;
        }
        Ok(a)
    }

    /// Forward pass over a batch (one example per row).
    ///
    /// When `masks` is given it holds one [`DropoutMask`] per row of `x`;
    /// all rows must mask the same set of layers.
    pub fn forward(&self, x: &Matrix, masks: Option<&[DropoutMask]>) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let scales = match masks {
            Some(m) => self.mask_scales(m, x.rows())?,
            None => vec![None; self.layers.len()],
        };
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (layer, scale) in self.layers.iter().zip(&scales) {
            let (z, mut h) = affine_activate(layer, &a)?;
            if let Some(s) = scale {
                for (v, k) in h.as_mut_slice().iter_mut().zip(s.as_slice()) {
                    *v *= k;
                }
            }
            pre.push(z);
            post.push(h.clone());
            a = h;
        }
        let cache = ForwardCache {
            input: x.clone(),
            pre,
            post,
            scales,
        };
        Ok((a, cache))
    }

    /// Back-propagates `grad_output` (gradient of the loss w.r.t. the network
    /// output) through the pass recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<Backward> {
        self.backward_impl(cache, grad_output, false)
    }

    /// Like [`Mlp::backward`], but `grad_logits` is the gradient w.r.t. the
    /// output layer's pre-activation. Used to pair a sigmoid output with
    /// cross-entropy without dividing by `p(1-p)`.
    pub fn backward_from_logits(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Backward> {
        self.backward_impl(cache, grad_logits, true)
    }

    fn backward_impl(&self, cache: &ForwardCache, grad: &Matrix, from_logits: bool) -> Result<Backward> {
        let n_layers = self.layers.len();
        if cache.pre.len() != n_layers {
            return Err(Error::invalid(format!(
                "cache holds {} layers, network has {n_layers}",
                cache.pre.len()
            )));
        }
        for (l, (layer, z)) in self.layers.iter().zip(&cache.pre).enumerate() {
            if z.cols() != layer.fan_out() || z.rows() != cache.input.rows() {
                return Err(Error::invalid(format!("cache does not match layer {l}")));
            }
        }
        if cache.input.cols() != self.input_dim() {
            return Err(Error::invalid("cache input width does not match network"));
        }
        if grad.shape() != cache.post[n_layers - 1].shape() {
            return Err(Error::invalid(format!(
                "output gradient is {}x{}, expected {}x{}",
                grad.rows(),
                grad.cols(),
                cache.post[n_layers - 1].rows(),
                cache.post[n_layers - 1].cols()
            )));
        }

        let mut grads = Vec::with_capacity(n_layers);
        let mut upstream = grad.clone();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let dz = if from_logits && l + 1 == n_layers {
                upstream
            } else {
                let z = &cache.pre[l];
                let h = &cache.post[l];
                let scale = cache.scales[l].as_ref();
                let mut dz = upstream;
                for (i, g) in dz.as_mut_slice().iter_mut().enumerate() {
                    // Stored `h` is post-mask; recover the unmasked activation.
                    let (s, h_raw) = match scale {
                        Some(s) => {
                            let s = s.as_slice()[i];
                            (s, layer.activation.apply(z.as_slice()[i]))
                        }
                        None => (1.0, h.as_slice()[i]),
                    };
                    *g *= s * layer.activation.derivative(z.as_slice()[i], h_raw);
                }
                dz
            };
            let a_prev = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let dw = a_prev.t_matmul(&dz)?;
            let db = dz.column_sums();
            upstream = dz.matmul_t(&layer.weights)?;
            grads.push(LayerGradient { weights: dw, bias: db });
        }
        grads.reverse();
        Ok(Backward {
            params: Gradients { layers: grads },
            input: upstream,
        })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn mask_scales(&self, masks: &[DropoutMask], rows: usize) -> Result<Vec<Option<Matrix>>> {
        if masks.len() != rows {
            return Err(Error::invalid(format!(
                "{} masks supplied for a batch of {rows}",
                masks.len()
            )));
        }
        let depth = masks.first().map_or(0, |m| m.layers.len());
        if depth > self.layers.len() {
            return Err(Error::invalid(format!(
                "mask covers {depth} layers, network has {}",
                self.layers.len()
            )));
        }
        let mut scales = vec![None; self.layers.len()];
        for (l, slot) in scales.iter_mut().enumerate().take(depth) {
            let width = self.layers[l].fan_out();
            let mut s = Matrix::zeros(rows, width);
            for (r, mask) in masks.iter().enumerate() {
                if mask.layers.len() != depth {
                    return Err(Error::invalid("masks in one batch cover different layers"));
                }
                if !(mask.keep_prob > 0.0 && mask.keep_prob <= 1.0) {
                    return Err(Error::invalid(format!(
                        "keep probability must lie in (0, 1], got {}",
                        mask.keep_prob
                    )));
                }
                let bits = &mask.layers[l];
                if bits.len() != width {
                    return Err(Error::invalid(format!(
                        "mask for layer {l} has {} entries, layer has {width} units",
                        bits.len()
                    )));
                }
                let keep_scale = 1.0 / mask.keep_prob;
                for (v, &b) in s.row_mut(r).iter_mut().zip(bits) {
                    *v = if b { keep_scale } else { 0.0 };
                }
            }
            *slot = Some(s);
        }
        Ok(scales)
    }
}

fn affine_activate(layer: &DenseLayer, a: &Matrix) -> Result<(Matrix, Matrix)> {
    let mut z = a.matmul(&layer.weights)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    let h = z.map(|v| layer.activation.apply(v));
    Ok((z, h))
}

/// Mean squared error over all entries and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() || pred.as_slice().is_empty() {
        return Err(Error::invalid("mse_loss needs equally shaped, non-empty inputs"));
    }
    let n = pred.as_slice().len() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let r = p - t;
        loss += r * r;
        *g = 2.0 * r / n;
    }
    Ok((loss / n, grad))
}

/// Binary cross-entropy of logits `z` against labels in {0, 1}, with its
/// gradient w.r.t. the logits.
pub fn bce_with_logits(logits: &Matrix, labels: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != labels.shape() || logits.as_slice().is_empty() {
        return Err(Error::invalid("bce_with_logits needs equally shaped, non-empty inputs"));
    }
    let n = logits.as_slice().len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for ((g, &z), &y) in grad.as_mut_slice().iter_mut().zip(logits.as_slice()).zip(labels.as_slice()) {
        // log(1 + e^z) - y z, evaluated stably
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - y) / n;
    }
    Ok((loss / n, grad))
}
