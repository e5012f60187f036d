//! Alternating-phase training of the multitask network.
//!
//! Epoch `k` (1-based) trains on the control batch when `k` is odd and on
//! the treated batch when `k` is even. Each epoch is one shuffled pass over
//! its batch in mini-batches; the shared trunk and the active head are
//! updated, and the other head is not touched. Every example gets fresh
//! dropout masks drawn with its own keep probability.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::ObservationalDataset;
use crate::dcn::{Arm, DcnArchitecture, DcnParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{mse_loss, DropoutMask};
use crate::propensity::{DropoutSchedule, PropensityModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub arch: DcnArchitecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            gamma: 1.0,
            batch_size: 32,
            adam: AdamConfig::default(),
            arch: DcnArchitecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        DropoutSchedule::new(self.gamma)?;
        self.adam.validate()
    }

    pub fn schedule(&self) -> DropoutSchedule {
        DropoutSchedule { gamma: self.gamma }
    }
}

/// Which arm epoch `k` (1-based) trains.
pub fn phase_of_epoch(k: usize) -> Arm {
    if k.is_multiple_of(2) {
        Arm::Treated
    } else {
        Arm::Control
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Arm,
    /// Maskless factual MSE on the epoch's batch, after the epoch's updates.
    pub factual_mse: Option<f64>,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    /// Called once per example per epoch with the keep probability used for
    /// its masks. `row` indexes the training dataset.
    fn on_keep_prob(&mut self, _epoch: usize, _row: usize, _keep_prob: f64) {}

    fn on_epoch(&mut self, _metrics: &EpochMetrics, _params: &DcnParams) {}

    /// Whether `on_epoch` should receive the factual MSE (costs one extra
    /// forward pass over the batch).
    fn wants_metrics(&self) -> bool {
        false
    }
}

impl TrainObserver for () {}

/// Writes one JSON object per epoch to `writer`.
pub struct JsonLinesMetrics<W: Write> {
    writer: W,
    error: Option<std::io::Error>,
}

impl<W: Write> JsonLinesMetrics<W> {
    pub fn new(writer: W) -> Self {
        JsonLinesMetrics { writer, error: None }
    }

    /// Returns the writer, or the first write error encountered.
    pub fn finish(mut self) -> Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.writer.flush()?;
        Ok(self.writer)
    }
}

impl<W: Write> TrainObserver for JsonLinesMetrics<W> {
    fn on_epoch(&mut self, metrics: &EpochMetrics, _params: &DcnParams) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(metrics).expect("metrics serialize");
        if let Err(e) = writeln!(self.writer, "{line}") {
            self.error = Some(e);
        }
    }

    fn wants_metrics(&self) -> bool {
        true
    }
}

/// Partitions rows by treatment: `(treated, control)`.
pub fn split_batches(dataset: &ObservationalDataset) -> (ObservationalDataset, ObservationalDataset) {
    let (treated, control) = arm_indices(dataset);
    (dataset.subset(&treated), dataset.subset(&control))
}

fn arm_indices(dataset: &ObservationalDataset) -> (Vec<usize>, Vec<usize>) {
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for (i, &w) in dataset.treatments().iter().enumerate() {
        if w {
            treated.push(i);
        } else {
            control.push(i);
        }
    }
    (treated, control)
}

/// Mean squared error of each row's factual head against its outcome.
pub fn factual_mse(params: &DcnParams, batch: &ObservationalDataset) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("factual_mse of an empty batch"));
    }
    let preds = params.predict_batch(batch.features())?;
    let sse: f64 = preds
        .iter()
        .zip(batch.treatments())
        .zip(batch.outcomes())
        .map(|((p, &w), y)| {
            let f = if w { p.y1 } else { p.y0 };
            (f - y).powi(2)
        })
        .sum();
    Ok(sse / batch.len() as f64)
}

/// Trains the network with propensity-dropout.
pub fn train_dcn<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    propensity: &PropensityModel,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<DcnParams> {
    train_dcn_observed(dataset, propensity, config, rng, &mut ())
}

pub fn train_dcn_observed<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    propensity: &PropensityModel,
    config: &TrainConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<DcnParams> {
    config.validate()?;
    if propensity.input_dim() != dataset.dim() {
        return Err(Error::invalid(format!(
            "propensity model expects {} features, dataset has {}",
            propensity.input_dim(),
            dataset.dim()
        )));
    }
    let schedule = config.schedule();
    let keep = (0..dataset.len())
        .map(|i| schedule.keep_probability(propensity.predict(dataset.features().row(i))?))
        .collect::<Result<Vec<_>>>()?;
    train_with_keep_probs(dataset, &keep, config, rng, observer)
}

/// The shared training loop; `keep_probs[i]` is the keep probability of row `i`.
pub(crate) fn train_with_keep_probs<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    keep_probs: &[f64],
    config: &TrainConfig,
    rng: &mut R,
    observer: &mut dyn TrainObserver,
) -> Result<DcnParams> {
    config.validate()?;
    let (treated, control) = arm_indices(dataset);
    if treated.is_empty() || control.is_empty() {
        return Err(Error::invalid(format!(
            "training needs both arms; got {} treated and {} control",
            treated.len(),
            control.len()
        )));
    }
    if let Some(&k) = keep_probs.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(Error::invalid(format!("keep probability {k} outside (0, 1]")));
    }
    let mut params = DcnParams::xavier(dataset.dim(), &config.arch, rng)?;
    let shapes = params.mask_shapes();
    let mut adam_shared = AdamState::new(params.shared(), config.adam);
    let mut adam_head0 = AdamState::new(params.head(Arm::Control), config.adam);
    let mut adam_head1 = AdamState::new(params.head(Arm::Treated), config.adam);

    for epoch in 1..=config.epochs {
        let arm = phase_of_epoch(epoch);
        let (mut order, head_shape, adam_head) = match arm {
            Arm::Control => (control.clone(), &shapes.head0, &mut adam_head0),
            Arm::Treated => (treated.clone(), &shapes.head1, &mut adam_head1),
        };
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let x = dataset.features().select_rows(chunk);
            let y = Matrix::new(chunk.len(), 1, chunk.iter().map(|&i| dataset.outcomes()[i]).collect())?;
            let mut shared_masks = Vec::with_capacity(chunk.len());
            let mut head_masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let keep = keep_probs[i];
                observer.on_keep_prob(epoch, i, keep);
                shared_masks.push(DropoutMask::sample(keep, &shapes.shared, rng)?);
                head_masks.push(DropoutMask::sample(keep, head_shape, rng)?);
            }
            let (out, shared_cache, head_cache) =
                params.forward_train(&x, arm, Some(&shared_masks), Some(&head_masks))?;
            let (loss, grad) = mse_loss(&out, &y)?;
            if !loss.is_finite() {
                return Err(Error::NumericFailure(format!("epoch {epoch}: loss became {loss}")));
            }
            let head_back = params.head(arm).backward(&head_cache, &grad)?;
            let shared_back = params.shared().backward(&shared_cache, &head_back.input)?;
            let (trunk, head) = params.trunk_and_head_mut(arm);
            adam_shared.step(trunk, &shared_back.params)?;
            adam_head.step(head, &head_back.params)?;
        }
        let factual = if observer.wants_metrics() {
            let idx = match arm {
                Arm::Control => &control,
                Arm::Treated => &treated,
            };
            Some(factual_mse(&params, &dataset.subset(idx))?)
        } else {
            None
        };
        observer.on_epoch(
            &EpochMetrics {
                epoch,
                phase: arm,
                factual_mse: factual,
            },
            &params,
        );
    }
    Ok(params)
}
