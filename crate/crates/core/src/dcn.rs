//! The multitask potential-outcomes network.
//!
//! A shared ReLU trunk feeds two outcome heads, one per treatment arm. Each
//! head ends in a scalar linear unit. Individualized effects are `y1 - y0`;
//! with propensity-dropout they are estimated by Monte Carlo over masks whose
//! keep probability depends on the subject's propensity score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, DropoutMask, ForwardCache, Mlp};
use crate::propensity::{DropoutSchedule, PropensityModel};

/// Treatment arm, which is also the task index of the multitask network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub fn of(treated: bool) -> Self {
        if treated {
            Arm::Treated
        } else {
            Arm::Control
        }
    }
}

/// Which head(s) a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    One(Arm),
    Both,
}

impl Heads {
    fn includes(self, arm: Arm) -> bool {
        match self {
            Heads::One(a) => a == arm,
            Heads::Both => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcnArchitecture {
    /// Widths of the shared layers.
    pub shared: Vec<usize>,
    /// Hidden widths of each outcome head, before its scalar output.
    pub head: Vec<usize>,
}

impl Default for DcnArchitecture {
    fn default() -> Self {
        DcnArchitecture {
            shared: vec![200, 200],
            head: vec![200],
        }
    }
}

impl DcnArchitecture {
    fn head_widths(&self) -> Vec<usize> {
        let mut w = self.head.clone();
        w.push(1);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcnParams {
    shared: Mlp,
    head0: Mlp,
    head1: Mlp,
}

/// Per-stack mask widths: every shared layer, and the hidden layers of each head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskShapes {
    pub shared: Vec<usize>,
    pub head0: Vec<usize>,
    pub head1: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcnMasks {
    pub shared: DropoutMask,
    pub head0: DropoutMask,
    pub head1: DropoutMask,
}

impl DcnMasks {
    pub fn ones(shapes: &MaskShapes) -> Self {
        DcnMasks {
            shared: DropoutMask::ones(&shapes.shared),
            head0: DropoutMask::ones(&shapes.head0),
            head1: DropoutMask::ones(&shapes.head1),
        }
    }

    pub fn head(&self, arm: Arm) -> &DropoutMask {
        match arm {
            Arm::Control => &self.head0,
            Arm::Treated => &self.head1,
        }
    }
}

/// Independent Bernoulli(`keep_prob`) masks for the trunk and both heads,
/// drawn in that order.
pub fn sample_masks<R: Rng + ?Sized>(keep_prob: f64, shapes: &MaskShapes, rng: &mut R) -> Result<DcnMasks> {
    Ok(DcnMasks {
        shared: DropoutMask::sample(keep_prob, &shapes.shared, rng)?,
        head0: DropoutMask::sample(keep_prob, &shapes.head0, rng)?,
        head1: DropoutMask::sample(keep_prob, &shapes.head1, rng)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcomes {
    pub y0: Option<f64>,
    pub y1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub y0: f64,
    pub y1: f64,
    pub ite: f64,
}

/// How the two heads' masks relate within one Monte Carlo draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMasking {
    #[default]
    Independent,
    /// Both heads use the control head's mask. Requires equal head shapes.
    Shared,
}

/// Monte Carlo summary of the effect for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteEstimate {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single draw.
    pub std: f64,
    /// Empirical 2.5% and 97.5% quantiles.
    pub interval: (f64, f64),
    pub y0_mean: f64,
    pub y1_mean: f64,
    pub keep_prob: f64,
}

impl DcnParams {
    pub fn new(shared: Mlp, head0: Mlp, head1: Mlp) -> Result<Self> {
        for (name, head) in [("head0", &head0), ("head1", &head1)] {
            if head.input_dim() != shared.output_dim() {
                return Err(Error::invalid(format!(
                    "{name} expects {} inputs but the shared stack emits {}",
                    head.input_dim(),
                    shared.output_dim()
                )));
            }
            if head.output_dim() != 1 {
                return Err(Error::invalid(format!("{name} must have a scalar output")));
            }
        }
        Ok(DcnParams { shared, head0, head1 })
    }

    pub fn xavier<R: Rng + ?Sized>(input_dim: usize, arch: &DcnArchitecture, rng: &mut R) -> Result<Self> {
        let shared = Mlp::xavier(input_dim, &arch.shared, Activation::Relu, Activation::Relu, rng)?;
        let width = shared.output_dim();
        let head0 = Mlp::xavier(width, &arch.head_widths(), Activation::Relu, Activation::Identity, rng)?;
        let head1 = Mlp::xavier(width, &arch.head_widths(), Activation::Relu, Activation::Identity, rng)?;
        DcnParams::new(shared, head0, head1)
    }

    pub fn zeros(input_dim: usize, arch: &DcnArchitecture) -> Result<Self> {
        let shared = Mlp::zeros(input_dim, &arch.shared, Activation::Relu, Activation::Relu)?;
        let width = shared.output_dim();
        let head0 = Mlp::zeros(width, &arch.head_widths(), Activation::Relu, Activation::Identity)?;
        let head1 = head0.clone();
        DcnParams::new(shared, head0, head1)
    }

    pub fn shared(&self) -> &Mlp {
        &self.shared
    }

    pub fn head(&self, arm: Arm) -> &Mlp {
        match arm {
            Arm::Control => &self.head0,
            Arm::Treated => &self.head1,
        }
    }

    pub(crate) fn trunk_and_head_mut(&mut self, arm: Arm) -> (&mut Mlp, &mut Mlp) {
        match arm {
            Arm::Control => (&mut self.shared, &mut self.head0),
            Arm::Treated => (&mut self.shared, &mut self.head1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.shared.input_dim()
    }

    pub fn mask_shapes(&self) -> MaskShapes {
        MaskShapes {
            shared: self.shared.widths(),
            head0: self.head0.hidden_widths(),
            head1: self.head1.hidden_widths(),
        }
    }

    /// Forward pass for one subject. The shared trunk runs once and feeds
    /// whichever heads are requested.
    pub fn forward(&self, x: &[f64], masks: Option<&DcnMasks>, heads: Heads) -> Result<Outcomes> {
        let xm = Matrix::row_vector(x);
        let masks = masks.map(std::slice::from_ref);
        let (y0, y1) = self.forward_batch(&xm, masks, heads)?;
        Ok(Outcomes {
            y0: y0.map(|v| v[0]),
            y1: y1.map(|v| v[0]),
        })
    }

    /// Batched forward; `masks`, when given, holds one triple per row.
    pub fn forward_batch(
        &self,
        x: &Matrix,
        masks: Option<&[DcnMasks]>,
        heads: Heads,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let shared_masks: Option<Vec<DropoutMask>> = masks.map(|m| m.iter().map(|t| t.shared.clone()).collect());
        let (rep, _) = self.shared.forward(x, shared_masks.as_deref())?;
        let run = |arm: Arm| -> Result<Option<Vec<f64>>> {
            if !heads.includes(arm) {
                return Ok(None);
            }
            let head_masks: Option<Vec<DropoutMask>> = masks.map(|m| m.iter().map(|t| t.head(arm).clone()).collect());
            let (out, _) = self.head(arm).forward(&rep, head_masks.as_deref())?;
            Ok(Some(out.into_vec()))
        };
        Ok((run(Arm::Control)?, run(Arm::Treated)?))
    }

    /// Trunk + one head with caches, for training.
    pub(crate) fn forward_train(
        &self,
        x: &Matrix,
        arm: Arm,
        shared_masks: Option<&[DropoutMask]>,
        head_masks: Option<&[DropoutMask]>,
    ) -> Result<(Matrix, ForwardCache, ForwardCache)> {
        let (rep, shared_cache) = self.shared.forward(x, shared_masks)?;
        let (out, head_cache) = self.head(arm).forward(&rep, head_masks)?;
        Ok((out, shared_cache, head_cache))
    }

    /// Maskless prediction of both potential outcomes.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let o = self.forward(x, None, Heads::Both)?;
        let (y0, y1) = (o.y0.unwrap_or_default(), o.y1.unwrap_or_default());
        Ok(Prediction { y0, y1, ite: y1 - y0 })
    }

    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<Prediction>> {
        let (y0, y1) = self.forward_batch(x, None, Heads::Both)?;
        let (y0, y1) = (y0.unwrap_or_default(), y1.unwrap_or_default());
        Ok(y0
            .into_iter()
            .zip(y1)
            .map(|(a, b)| Prediction { y0: a, y1: b, ite: b - a })
            .collect())
    }

    /// Monte Carlo propensity-dropout estimate of the effect at `x`.
    pub fn estimate_ite<R: Rng + ?Sized>(
        &self,
        propensity: &PropensityModel,
        schedule: &DropoutSchedule,
        x: &[f64],
        n_samples: usize,
        rng: &mut R,
    ) -> Result<IteEstimate> {
        let p = propensity.predict(x)?;
        let keep = schedule.keep_probability(p)?;
        self.estimate_ite_with_keep(keep, x, n_samples, HeadMasking::Independent, rng)
    }

    /// Monte Carlo estimate with an explicit keep probability.
    pub fn estimate_ite_with_keep<R: Rng + ?Sized>(
        &self,
        keep_prob: f64,
        x: &[f64],
        n_samples: usize,
        coupling: HeadMasking,
        rng: &mut R,
    ) -> Result<IteEstimate> {
        if n_samples == 0 {
            return Err(Error::invalid("estimate_ite needs at least one sample"));
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::invalid(format!(
                "keep probability {keep_prob} leaves nothing of the network"
            )));
        }
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let shapes = self.mask_shapes();
        if coupling == HeadMasking::Shared && shapes.head0 != shapes.head1 {
            return Err(Error::invalid("shared head masks need identically shaped heads"));
        }
        let mut masks = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let m = match coupling {
                HeadMasking::Independent => sample_masks(keep_prob, &shapes, rng)?,
                HeadMasking::Shared => {
                    let shared = DropoutMask::sample(keep_prob, &shapes.shared, rng)?;
                    let head = DropoutMask::sample(keep_prob, &shapes.head0, rng)?;
                    DcnMasks {
                        shared,
                        head1: head.clone(),
                        head0: head,
                    }
                }
            };
            masks.push(m);
        }
        let xs = Matrix::new(n_samples, x.len(), x.repeat(n_samples))?;
        let (y0, y1) = self.forward_batch(&xs, Some(&masks), Heads::Both)?;
        let (y0, y1) = (y0.unwrap_or_default(), y1.unwrap_or_default());
        let samples: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        Ok(summarize(samples, &y0, &y1, keep_prob))
    }
}

fn summarize(samples: Vec<f64>, y0: &[f64], y1: &[f64], keep_prob: f64) -> IteEstimate {
    let (mean, var) = welford(&samples);
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    IteEstimate {
        mean,
        std: var.sqrt(),
        interval: (quantile(&sorted, 0.025), quantile(&sorted, 0.975)),
        y0_mean: welford(y0).0,
        y1_mean: welford(y1).0,
        keep_prob,
        samples,
    }
}

// Running mean and unbiased variance; identical inputs give exactly zero
// variance and a mean equal to the common value.
fn welford(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = if xs.len() > 1 { m2 / (xs.len() - 1) as f64 } else { 0.0 };
    (mean, var.max(0.0))
}

// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
