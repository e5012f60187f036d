//! Propensity network and the propensity-dropout schedule.
//!
//! The dropout probability for a subject with estimated propensity `p` is
//! `1 - gamma/2 - H(p)/2`, where `H` is the base-2 binary entropy. Balanced
//! subjects (`p = 0.5`, `H = 1`) get the lowest dropout, `(1 - gamma)/2`;
//! subjects with near-certain assignment get the highest, `1 - gamma/2`.
//!
//! Masks are drawn with the complementary keep probability
//! `gamma/2 + H(p)/2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{ObservationalDataset, Standardizer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{bce_with_logits, Activation, Mlp};

/// Predictions are clamped to `[CLAMP, 1 - CLAMP]`.
pub const CLAMP: f64 = 1e-12;

/// Base-2 binary entropy, with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("entropy needs p in [0, 1], got {p}")));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSchedule {
    pub gamma: f64,
}

impl Default for DropoutSchedule {
    fn default() -> Self {
        DropoutSchedule { gamma: 1.0 }
    }
}

impl DropoutSchedule {
    pub fn new(gamma: f64) -> Result<Self> {
        let s = DropoutSchedule { gamma };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// `1 - gamma/2 - H(p)/2`
    pub fn dropout_probability(&self, p_tilde: f64) -> Result<f64> {
        self.validate()?;
        Ok(1.0 - self.gamma / 2.0 - binary_entropy(p_tilde)? / 2.0)
    }

    /// `gamma/2 + H(p)/2`
    pub fn keep_probability(&self, p_tilde: f64) -> Result<f64> {
        self.validate()?;
        Ok(self.gamma / 2.0 + binary_entropy(p_tilde)? / 2.0)
    }
}

pub fn dropout_probability(p_tilde: f64, schedule: &DropoutSchedule) -> Result<f64> {
    schedule.dropout_probability(p_tilde)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    /// Hidden layer widths; a single sigmoid unit is appended.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            hidden: vec![25, 25],
            epochs: 500,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    net: Mlp,
    scaler: Standardizer,
    loss_history: Vec<f64>,
}

impl PropensityModel {
    /// Wraps a network ending in one sigmoid unit.
    pub fn from_parts(net: Mlp, scaler: Standardizer) -> Result<Self> {
        let last = &net.layers()[net.layers().len() - 1];
        if net.output_dim() != 1 || last.activation() != Activation::Sigmoid {
            return Err(Error::invalid("propensity network must end in a single sigmoid unit"));
        }
        if scaler.dim() != net.input_dim() {
            return Err(Error::invalid("standardizer and network disagree on input width"));
        }
        Ok(PropensityModel {
            net,
            scaler,
            loss_history: Vec::new(),
        })
    }

    /// Network whose every output is exactly 0.5.
    pub fn constant_half(dim: usize) -> Result<Self> {
        let net = Mlp::zeros(dim, &[1], Activation::Relu, Activation::Sigmoid)?;
        PropensityModel::from_parts(net, Standardizer::identity(dim))
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.scaler
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Full-batch cross-entropy per training epoch; empty for loaded models.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let z = self.scaler.apply_row(x)?;
        let out = self.net.predict(&Matrix::row_vector(&z))?;
        Ok(clamp(out.get(0, 0)))
    }

    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = self.scaler.apply(x)?;
        Ok(self.net.predict(&z)?.into_vec().into_iter().map(clamp).collect())
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// Fits `P(W = 1 | X)` by full-batch Adam on binary cross-entropy.
pub fn train_propensity<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    config: &PropensityConfig,
    rng: &mut R,
) -> Result<PropensityModel> {
    let treated = dataset.treated_count();
    if treated == 0 || treated == dataset.len() {
        return Err(Error::invalid(
            "propensity training needs both treated and control subjects",
        ));
    }
    config.adam.validate()?;
    let scaler = Standardizer::fit(dataset.features())?;
    let x = scaler.apply(dataset.features())?;
    let labels = Matrix::new(
        dataset.len(),
        1,
        dataset.treatments().iter().map(|&w| if w { 1.0 } else { 0.0 }).collect(),
    )?;
    let mut widths = config.hidden.clone();
    widths.push(1);
    let mut net = Mlp::xavier(dataset.dim(), &widths, Activation::Relu, Activation::Sigmoid, rng)?;
    let mut adam = AdamState::new(&net, config.adam);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (_, cache) = net.forward(&x, None)?;
        let (loss, grad) = bce_with_logits(cache.output_logits(), &labels)?;
        if !loss.is_finite() {
            return Err(Error::NumericFailure(format!("propensity loss became {loss}")));
        }
        history.push(loss);
        let back = net.backward_from_logits(&cache, &grad)?;
        adam.step(&mut net, &back.params)?;
    }
    let mut model = PropensityModel::from_parts(net, scaler)?;
    model.loss_history = history;
    Ok(model)
}
