//! Synthetic observational data with selection bias and known effects.
//!
//! Covariates are standard normal. Treatment follows a logistic propensity
//! along the fixed direction `a = (1, ..., 1) / sqrt(d)`. Outcome
//! coefficients `beta` are drawn per realization from
//! `{0, 0.1, 0.2, 0.3, 0.4}` with probabilities `(0.6, 0.1, 0.1, 0.1, 0.1)`.
//!
//! Surfaces:
//! - `LinearOffset`: `mu0 = x·beta`, `mu1 = x·beta + 2 + x1`
//! - `ExpSurface`: `mu0 = exp((x + 0.5)·beta)`, `mu1 = x·beta`

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ObservationalDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSurface {
    LinearOffset,
    ExpSurface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    pub bias_strength: f64,
    pub noise_std: f64,
    pub surface: ResponseSurface,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(format!("synthetic n must be >= 2, got {}", self.n)));
        }
        if self.d < 1 {
            return Err(Error::invalid("synthetic d must be >= 1"));
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return Err(Error::invalid(format!("bias_strength must be >= 0, got {}", self.bias_strength)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Generates a realization from `self.seed`.
    pub fn generate(&self) -> Result<SyntheticDataset> {
        generate_synthetic(self, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    pub fn direction(&self) -> Vec<f64> {
        vec![1.0 / (self.d as f64).sqrt(); self.d]
    }
}

/// Features and treatment assignments, before any outcomes are simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub x: Matrix,
    pub w: Vec<bool>,
    /// True assignment probabilities.
    pub propensity: Vec<f64>,
}

/// Generator settings and the coefficients drawn for one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub config: SyntheticConfig,
    pub beta: Vec<f64>,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: ObservationalDataset,
    pub realization: Realization,
}

impl SyntheticDataset {
    /// JSON describing how the data were generated.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.realization)?)
    }
}

/// Draws covariates, treatments, coefficients and noise from one stream.
pub fn generate_synthetic<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<SyntheticDataset> {
    let cov = draw_covariates(config, rng)?;
    simulate_outcomes(config, &cov, rng)
}

pub fn draw_covariates<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<Covariates> {
    config.validate()?;
    let SyntheticConfig { n, d, .. } = *config;
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x = Matrix::new(n, d, data)?;
    let a = config.direction();
    let mut w = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    for i in 0..n {
        let p = sigmoid(config.bias_strength * dot(x.row(i), &a));
        let coin = Bernoulli::new(p).map_err(|e| Error::NumericFailure(format!("propensity {p}: {e}")))?;
        w.push(coin.sample(rng));
        propensity.push(p);
    }
    Ok(Covariates { x, w, propensity })
}

/// Draws a fresh coefficient vector and noise for fixed covariates.
pub fn simulate_outcomes<R: Rng + ?Sized>(
    config: &SyntheticConfig,
    cov: &Covariates,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    config.validate()?;
    if cov.x.cols() != config.d || cov.x.rows() != cov.w.len() {
        return Err(Error::invalid("covariates do not match the synthetic configuration"));
    }
    let beta = draw_beta(config.d, rng);
    let n = cov.x.rows();
    let mut mu0 = Vec::with_capacity(n);
    let mut mu1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let x = cov.x.row(i);
        let lin = dot(x, &beta);
        let (m0, m1) = match config.surface {
            ResponseSurface::LinearOffset => (lin, lin + 2.0 + x[0]),
            ResponseSurface::ExpSurface => {
                let shifted: f64 = x.iter().zip(&beta).map(|(xi, b)| (xi + 0.5) * b).sum();
                (shifted.exp(), lin)
            }
        };
        let eps: f64 = rng.sample(StandardNormal);
        let mu_w = if cov.w[i] { m1 } else { m0 };
        y.push(mu_w + config.noise_std * eps);
        mu0.push(m0);
        mu1.push(m1);
    }
    let dataset = ObservationalDataset::new(cov.x.clone(), cov.w.clone(), y)?.with_potential_outcomes(mu0, mu1)?;
    Ok(SyntheticDataset {
        dataset,
        realization: Realization {
            config: config.clone(),
            beta,
            direction: config.direction(),
        },
    })
}

const BETA_VALUES: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
const BETA_PROBS: [f64; 5] = [0.6, 0.1, 0.1, 0.1, 0.1];

fn draw_beta<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (v, p) in BETA_VALUES.iter().zip(BETA_PROBS) {
                acc += p;
                if u < acc {
                    return *v;
                }
            }
            BETA_VALUES[BETA_VALUES.len() - 1]
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
