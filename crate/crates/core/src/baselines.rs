//! Comparison estimators: nearest-neighbour matching, a single network that
//! takes the treatment as an input feature, and the multitask network with
//! uniform dropout.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ObservationalDataset;
use crate::dcn::DcnParams;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{mse_loss, Activation, DropoutMask, Mlp};
use crate::training::{train_with_keep_probs, TrainConfig, TrainObserver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 5 }
    }
}

/// Matching estimator over a fixed training set. Distances are Euclidean on
/// the features as given (callers standardize first).
#[derive(Debug, Clone)]
pub struct KnnMatcher<'a> {
    train: &'a ObservationalDataset,
    treated: Vec<usize>,
    control: Vec<usize>,
    k: usize,
}

impl<'a> KnnMatcher<'a> {
    pub fn new(train: &'a ObservationalDataset, config: KnnConfig) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let (treated, control): (Vec<usize>, Vec<usize>) =
            (0..train.len()).partition(|&i| train.treatments()[i]);
        if treated.len() < config.k || control.len() < config.k {
            return Err(Error::invalid(format!(
                "k = {} exceeds a treatment group ({} treated, {} control)",
                config.k,
                treated.len(),
                control.len()
            )));
        }
        Ok(KnnMatcher {
            train,
            treated,
            control,
            k: config.k,
        })
    }

    /// Mean outcome of the `k` nearest treated minus that of the `k` nearest
    /// control rows; ties go to the lower row index.
    pub fn ite(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.train.dim() {
            return Err(Error::invalid(format!(
                "query has {} features, training data has {}",
                x.len(),
                self.train.dim()
            )));
        }
        Ok(self.group_mean(x, &self.treated) - self.group_mean(x, &self.control))
    }

    /// Row indices of the `k` nearest members of the treated or control group, nearest first.
    pub fn neighbours(&self, x: &[f64], treated: bool) -> Vec<usize> {
        let group = if treated { &self.treated } else { &self.control };
        self.nearest(x, group).into_iter().map(|(_, i)| i).collect()
    }

    fn group_mean(&self, x: &[f64], group: &[usize]) -> f64 {
        let y = self.train.outcomes();
        let sum: f64 = self.nearest(x, group).iter().map(|&(_, i)| y[i]).sum();
        sum / self.k as f64
    }

    fn nearest(&self, x: &[f64], group: &[usize]) -> Vec<(f64, usize)> {
        let feats = self.train.features();
        let mut cand: Vec<(f64, usize)> = group
            .iter()
            .map(|&i| (squared_distance(x, feats.row(i)), i))
            .collect();
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < cand.len() {
            cand.select_nth_unstable_by(self.k - 1, by_key);
            cand.truncate(self.k);
        }
        cand.sort_by(by_key);
        cand
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

pub fn knn_ite(train: &ObservationalDataset, x: &[f64], config: KnnConfig) -> Result<f64> {
    KnnMatcher::new(train, config)?.ite(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectConfig {
    /// Hidden widths; a scalar linear output is appended.
    pub hidden: Vec<usize>,
    /// Uniform dropout probability on every hidden layer.
    pub dropout: f64,
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig {
            hidden: vec![200, 200, 200],
            dropout: 0.2,
        }
    }
}

impl DirectConfig {
    fn widths(&self) -> Vec<usize> {
        let mut w = self.hidden.clone();
        w.push(1);
        w
    }
}

/// Single-output regression `f(x, w)` with the treatment appended as the
/// last input feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectModel {
    net: Mlp,
}

impl DirectModel {
    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() < 2 {
            return Err(Error::invalid("direct model needs >= 1 feature plus the treatment input and a scalar output"));
        }
        Ok(DirectModel { net })
    }

    pub fn zeros(dim: usize, config: &DirectConfig) -> Result<Self> {
        DirectModel::from_net(Mlp::zeros(dim + 1, &config.widths(), Activation::Relu, Activation::Identity)?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim() - 1
    }

    pub fn predict_outcome(&self, x: &[f64], treated: bool) -> Result<f64> {
        let out = self.net.predict(&augment(&Matrix::row_vector(x), treated)?)?;
        Ok(out.get(0, 0))
    }

    /// `f(x, 1) - f(x, 0)`
    pub fn predict_ite(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_outcome(x, true)? - self.predict_outcome(x, false)?)
    }

    pub fn predict_ite_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        let y1 = self.net.predict(&augment(x, true)?)?;
        let y0 = self.net.predict(&augment(x, false)?)?;
        Ok(y1.as_slice().iter().zip(y0.as_slice()).map(|(a, b)| a - b).collect())
    }
}

fn augment(x: &Matrix, treated: bool) -> Result<Matrix> {
    augment_with(x, |_| treated)
}

fn augment_with(x: &Matrix, treated: impl Fn(usize) -> bool) -> Result<Matrix> {
    let d = x.cols();
    let mut data = Vec::with_capacity(x.rows() * (d + 1));
    for r in 0..x.rows() {
        data.extend_from_slice(x.row(r));
        data.push(if treated(r) { 1.0 } else { 0.0 });
    }
    Matrix::new(x.rows(), d + 1, data)
}

pub fn train_direct_nn<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    arch: &DirectConfig,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<DirectModel> {
    train_direct_nn_observed(dataset, arch, config, rng, &mut |_, _| {})
}

/// As [`train_direct_nn`], calling `on_epoch(k, model)` after every epoch.
pub fn train_direct_nn_observed<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    arch: &DirectConfig,
    config: &TrainConfig,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(usize, &DirectModel),
) -> Result<DirectModel> {
    config.validate()?;
    if !(0.0..1.0).contains(&arch.dropout) {
        return Err(Error::invalid(format!("dropout must lie in [0, 1), got {}", arch.dropout)));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let keep = 1.0 - arch.dropout;
    let inputs = augment_with(dataset.features(), |r| dataset.treatments()[r])?;
    let mut model = DirectModel::from_net(Mlp::xavier(
        dataset.dim() + 1,
        &arch.widths(),
        Activation::Relu,
        Activation::Identity,
        rng,
    )?)?;
    let hidden = model.net.hidden_widths();
    let mut adam = crate::adam::AdamState::new(&model.net, config.adam);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let x = inputs.select_rows(chunk);
            let y = Matrix::new(chunk.len(), 1, chunk.iter().map(|&i| dataset.outcomes()[i]).collect())?;
            let masks = chunk
                .iter()
                .map(|_| DropoutMask::sample(keep, &hidden, rng))
                .collect::<Result<Vec<_>>>()?;
            let (out, cache) = model.net.forward(&x, Some(&masks))?;
            let (loss, grad) = mse_loss(&out, &y)?;
            if !loss.is_finite() {
                return Err(Error::NumericFailure(format!("epoch {epoch}: loss became {loss}")));
            }
            let back = model.net.backward(&cache, &grad)?;
            adam.step(&mut model.net, &back.params)?;
        }
        on_epoch(epoch, &model);
    }
    Ok(model)
}

/// The multitask network trained with the same dropout probability for
/// every example; no propensity model is involved.
pub fn train_dcn_fixed_dropout<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    dropout_prob: f64,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<DcnParams> {
    train_dcn_fixed_dropout_observed(dataset, dropout_prob, config, rng, &mut ())
}

pub fn train_dcn_fixed_dropout_observed<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    dropout_prob: f64,
    config: &TrainConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<DcnParams> {
    if !(0.0..1.0).contains(&dropout_prob) {
        return Err(Error::invalid(format!("dropout must lie in [0, 1), got {dropout_prob}")));
    }
    let keep = vec![1.0 - dropout_prob; dataset.len()];
    train_with_keep_probs(dataset, &keep, config, rng, observer)
}
