//! Individualized treatment effect estimation with deep counterfactual
//! networks and propensity-dropout.
//!
//! The pipeline:
//!
//! 1. [`propensity::train_propensity`] fits `P(W = 1 | X)`.
//! 2. [`training::train_dcn`] trains a multitask network (shared trunk, one
//!    head per treatment arm) in alternating control/treated epochs, with a
//!    per-example dropout probability set by the subject's propensity score.
//! 3. [`dcn::DcnParams::estimate_ite`] draws Monte Carlo samples of the
//!    effect `y1 - y0` under the same dropout scheme.
//!
//! [`baselines`] holds the comparison estimators and [`experiment`] the
//! repeated-realization benchmark harness.

pub mod adam;
pub mod baselines;
pub mod data;
pub mod dcn;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod matrix;
pub mod nn;
pub mod persist;
pub mod propensity;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
