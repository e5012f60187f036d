//! Repeated-realization benchmark harness.
//!
//! Each repetition draws (or loads) one dataset realization, splits it,
//! standardizes features on the training part, fits the selected model and
//! scores its effect predictions on the held-out part against the true
//! effects. Every random stream in repetition `r` is derived from the master
//! seed and `r` alone, so models compared under one seed see identical data
//! and splits, and adding repetitions leaves earlier ones unchanged.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_dcn_fixed_dropout, train_direct_nn, DirectConfig, DirectModel, KnnConfig, KnnMatcher};
use crate::data::{
    draw_covariates, load_csv, simulate_outcomes, split_indices, CsvSchema, ObservationalDataset, Standardizer,
    SyntheticConfig, SyntheticDataset,
};
use crate::dcn::DcnParams;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::persist::{DcnDocument, PropensityDocument, StackDocument, SCHEMA_VERSION};
use crate::propensity::{train_propensity, DropoutSchedule, PropensityConfig, PropensityModel};
use crate::training::{train_dcn, TrainConfig};

/// Model selection: `dcn-pd`, `dcn-fixed:<p>`, `nn4` or `knn:<k>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    DcnPd,
    DcnFixed(f64),
    Nn4,
    Knn(usize),
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::DcnPd => write!(f, "dcn-pd"),
            ModelKind::DcnFixed(p) => write!(f, "dcn-fixed:{p}"),
            ModelKind::Nn4 => write!(f, "nn4"),
            ModelKind::Knn(k) => write!(f, "knn:{k}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown model `{s}` (expected dcn-pd, dcn-fixed:<p>, nn4 or knn:<k>)"));
        let kind = match s.split_once(':') {
            None if s == "dcn-pd" => ModelKind::DcnPd,
            None if s == "nn4" => ModelKind::Nn4,
            Some(("dcn-fixed", p)) => ModelKind::DcnFixed(p.parse().map_err(|_| bad())?),
            Some(("knn", k)) => ModelKind::Knn(k.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl ModelKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelKind::DcnFixed(p) if !(0.0..1.0).contains(&p) => {
                Err(Error::Config(format!("dcn-fixed dropout must lie in [0, 1), got {p}")))
            }
            ModelKind::Knn(0) => Err(Error::Config("knn needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl Serialize for ModelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// Pre-generated realizations; repetition `r` reads `paths[r % len]`.
    Csv {
        paths: Vec<PathBuf>,
        #[serde(default)]
        schema: Option<CsvSchema>,
    },
}

fn default_reps() -> usize {
    100
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_mc_samples() -> usize {
    100
}
fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub source: DataSource,
    pub model: ModelKind,
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub propensity: PropensityConfig,
    #[serde(default)]
    pub direct: DirectConfig,
    /// Monte Carlo draws per test subject for `dcn-pd`.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Reuse repetition 0's train/test split in every repetition.
    #[serde(default)]
    pub fixed_split: bool,
    /// Synthetic sources only: keep covariates and treatments fixed and
    /// redraw only coefficients and noise per repetition.
    #[serde(default)]
    pub fixed_covariates: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(source: DataSource, model: ModelKind, seed: u64) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            source,
            model,
            seed,
            reps: default_reps(),
            train_fraction: default_train_fraction(),
            train: TrainConfig::default(),
            propensity: PropensityConfig::default(),
            direct: DirectConfig::default(),
            mc_samples: default_mc_samples(),
            fixed_split: false,
            fixed_covariates: false,
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    /// Parses and validates an already-decoded JSON document.
    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// All validation failures surface as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) | Error::InvalidArgument(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        self.model.validate()?;
        self.train.validate().map_err(cfg)?;
        self.propensity.adam.validate().map_err(cfg)?;
        if !(0.0..1.0).contains(&self.direct.dropout) {
            return Err(Error::Config(format!("direct.dropout must lie in [0, 1), got {}", self.direct.dropout)));
        }
        match &self.source {
            DataSource::Synthetic(s) => s.validate().map_err(cfg)?,
            DataSource::Csv { paths, .. } => {
                if paths.is_empty() {
                    return Err(Error::Config("csv source lists no paths".into()));
                }
                if self.fixed_covariates {
                    return Err(Error::Config("fixed_covariates applies to synthetic sources only".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub model: ModelKind,
    /// Held-out effect MSE of each repetition, in repetition order.
    pub per_rep_mse: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over repetitions divided by `sqrt(R)`.
    pub std_err: f64,
    pub config: ExperimentConfig,
    pub duration_secs: f64,
}

impl ExperimentReport {
    pub fn from_mses(config: ExperimentConfig, per_rep_mse: Vec<f64>, duration_secs: f64) -> Self {
        let (mean, std_err) = mean_and_std_err(&per_rep_mse);
        ExperimentReport {
            schema_version: SCHEMA_VERSION,
            model: config.model,
            per_rep_mse,
            mean,
            std_err,
            config,
            duration_secs,
        }
    }

    /// Checks the report's internal consistency.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!("report schema_version {}", self.schema_version)));
        }
        if self.per_rep_mse.len() != self.config.reps {
            return Err(Error::invalid(format!(
                "report has {} repetitions, config asks for {}",
                self.per_rep_mse.len(),
                self.config.reps
            )));
        }
        if self.per_rep_mse.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("report contains a non-finite or negative MSE"));
        }
        let (mean, se) = mean_and_std_err(&self.per_rep_mse);
        if !close(mean, self.mean) || !close(se, self.std_err) {
            return Err(Error::invalid("report aggregates disagree with per-repetition values"));
        }
        Ok(())
    }

    /// JSON body with the wall-clock duration zeroed, for reproducibility checks.
    pub fn body_without_duration(&self) -> Result<String> {
        let mut r = self.clone();
        r.duration_secs = 0.0;
        Ok(serde_json::to_string(&r)?)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

pub fn mean_and_std_err(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean squared difference between predicted and true effects.
pub fn ite_mse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "ite_mse: {} predictions vs {} true effects",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("ite_mse of empty vectors"));
    }
    let sse: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sse / predicted.len() as f64)
}

/// Independent random streams of one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Covariates = 0,
    Outcomes = 1,
    Split = 2,
    Model = 3,
    MonteCarlo = 4,
}

/// SplitMix64-style mixing of `(master, repetition, stream)`.
pub fn derive_seed(master: u64, repetition: u64, stream: Stream) -> u64 {
    let mut z = master
        ^ repetition.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn stream_rng(master: u64, repetition: usize, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, repetition as u64, stream))
}

/// One repetition's data, with features standardized on the training part.
#[derive(Debug, Clone)]
pub struct Repetition {
    pub index: usize,
    pub train: ObservationalDataset,
    pub test: ObservationalDataset,
    pub standardizer: Standardizer,
}

/// Repetition `index`'s synthetic realization, or `None` for CSV sources.
pub fn synthetic_realization(config: &ExperimentConfig, index: usize) -> Result<Option<SyntheticDataset>> {
    let DataSource::Synthetic(s) = &config.source else {
        return Ok(None);
    };
    let cov_rep = if config.fixed_covariates { 0 } else { index };
    let cov = draw_covariates(s, &mut stream_rng(config.seed, cov_rep, Stream::Covariates))?;
    simulate_outcomes(s, &cov, &mut stream_rng(config.seed, index, Stream::Outcomes)).map(Some)
}

/// The full (unsplit, unstandardized) dataset of repetition `index`.
pub fn load_realization(config: &ExperimentConfig, index: usize) -> Result<ObservationalDataset> {
    match &config.source {
        DataSource::Synthetic(_) => Ok(synthetic_realization(config, index)?.expect("synthetic source").dataset),
        DataSource::Csv { paths, schema } => load_csv(&paths[index % paths.len()], schema.as_ref()),
    }
}

/// Draws or loads repetition `index`'s realization and split.
pub fn prepare_repetition(config: &ExperimentConfig, index: usize) -> Result<Repetition> {
    let full = load_realization(config, index)?;
    if full.true_ite().is_none() {
        return Err(Error::invalid("dataset has no mu0/mu1 columns; effects cannot be scored"));
    }
    let split_rep = if config.fixed_split { 0 } else { index };
    let (train_idx, test_idx) = split_indices(
        full.len(),
        config.train_fraction,
        &mut stream_rng(config.seed, split_rep, Stream::Split),
    )?;
    let train = full.subset(&train_idx);
    let test = full.subset(&test_idx);
    let standardizer = Standardizer::fit(train.features())?;
    Ok(Repetition {
        index,
        train: train.with_features(standardizer.apply(train.features())?)?,
        test: test.with_features(standardizer.apply(test.features())?)?,
        standardizer,
    })
}

/// A trained estimator of individualized effects.
#[derive(Debug, Clone)]
pub enum FittedModel {
    DcnPd {
        dcn: DcnParams,
        propensity: PropensityModel,
        schedule: DropoutSchedule,
        mc_samples: usize,
    },
    DcnFixed {
        dropout: f64,
        dcn: DcnParams,
    },
    Direct(DirectModel),
    Knn {
        train: ObservationalDataset,
        k: usize,
    },
}

impl FittedModel {
    /// Effect estimates for every row of `x` (features already standardized).
    /// `dcn-pd` reports the Monte Carlo mean; the others are deterministic.
    pub fn predict_ite(&self, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            FittedModel::DcnPd {
                dcn,
                propensity,
                schedule,
                mc_samples,
            } => (0..x.rows())
                .map(|i| Ok(dcn.estimate_ite(propensity, schedule, x.row(i), *mc_samples, rng)?.mean))
                .collect(),
            FittedModel::DcnFixed { dcn, .. } => Ok(dcn.predict_batch(x)?.into_iter().map(|p| p.ite).collect()),
            FittedModel::Direct(m) => m.predict_ite_batch(x),
            FittedModel::Knn { train, k } => {
                let matcher = KnnMatcher::new(train, KnnConfig { k: *k })?;
                (0..x.rows()).map(|i| matcher.ite(x.row(i))).collect()
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FittedModel::DcnPd { dcn, .. } | FittedModel::DcnFixed { dcn, .. } => dcn.input_dim(),
            FittedModel::Direct(m) => m.dim(),
            FittedModel::Knn { train, .. } => train.dim(),
        }
    }
}

/// Trains `config.model` on `train` (standardized features).
pub fn fit_model(config: &ExperimentConfig, train: &ObservationalDataset, rng: &mut ChaCha8Rng) -> Result<FittedModel> {
    Ok(match config.model {
        ModelKind::DcnPd => {
            let propensity = train_propensity(train, &config.propensity, rng)?;
            let dcn = train_dcn(train, &propensity, &config.train, rng)?;
            FittedModel::DcnPd {
                dcn,
                propensity,
                schedule: config.train.schedule(),
                mc_samples: config.mc_samples,
            }
        }
        ModelKind::DcnFixed(p) => FittedModel::DcnFixed {
            dropout: p,
            dcn: train_dcn_fixed_dropout(train, p, &config.train, rng)?,
        },
        ModelKind::Nn4 => FittedModel::Direct(train_direct_nn(train, &config.direct, &config.train, rng)?),
        ModelKind::Knn(k) => {
            KnnMatcher::new(train, KnnConfig { k })?;
            FittedModel::Knn { train: train.clone(), k }
        }
    })
}

/// Held-out effect MSE of one repetition.
pub fn run_repetition(config: &ExperimentConfig, index: usize) -> Result<f64> {
    let rep = prepare_repetition(config, index)?;
    let model = fit_model(config, &rep.train, &mut stream_rng(config.seed, index, Stream::Model))?;
    let pred = model.predict_ite(rep.test.features(), &mut stream_rng(config.seed, index, Stream::MonteCarlo))?;
    let truth = rep.test.true_ite().expect("checked in prepare_repetition");
    ite_mse(&pred, &truth)
}

/// Runs all repetitions (concurrently) and aggregates them in index order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let mses = (0..config.reps)
        .into_par_iter()
        .map(|r| {
            run_repetition(config, r).map_err(|e| Error::Repetition {
                index: r,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ExperimentReport::from_mses(
        config.clone(),
        mses,
        start.elapsed().as_secs_f64(),
    ))
}

/// Runs the same experiment once per model; repetition `r` of every model
/// sees the same realization and split.
pub fn run_benchmark(config: &ExperimentConfig, models: &[ModelKind]) -> Result<Vec<ExperimentReport>> {
    models
        .iter()
        .map(|&m| {
            let cfg = ExperimentConfig {
                model: m,
                ..config.clone()
            };
            run_experiment(&cfg)
        })
        .collect()
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "repetitions.csv";

/// File stem used when several reports share one output directory.
pub fn report_stem(model: ModelKind) -> String {
    model.to_string().replace(':', "_")
}

/// Writes `report.json` and `repetitions.csv` into `dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
    w.write_record(["schema_version", "model", "repetition", "ite_mse"])?;
    for (r, v) in report.per_rep_mse.iter().enumerate() {
        w.write_record([
            SCHEMA_VERSION.to_string(),
            report.model.to_string(),
            r.to_string(),
            v.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads per-repetition MSEs back from an emitted CSV.
pub fn read_repetitions_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(3).unwrap_or_default();
        out.push(raw.parse().map_err(|e| Error::Parse {
            row: i + 2,
            column: "ite_mse".into(),
            message: format!("`{raw}`: {e}"),
        })?);
    }
    Ok(out)
}

/// Writes one row per subject: `row, ite_hat` and, when known, `ite_true`.
pub fn write_predictions(path: impl AsRef<Path>, predicted: &[f64], truth: Option<&[f64]>) -> Result<()> {
    if let Some(t) = truth {
        if t.len() != predicted.len() {
            return Err(Error::invalid("prediction and truth lengths differ"));
        }
    }
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    match truth {
        Some(_) => w.write_record(["row", "ite_hat", "ite_true"])?,
        None => w.write_record(["row", "ite_hat"])?,
    }
    for (i, p) in predicted.iter().enumerate() {
        let mut rec = vec![i.to_string(), p.to_string()];
        if let Some(t) = truth {
            rec.push(t[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Self-contained trained model: the features' standardization plus
/// whatever the estimator needs at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub model: ModelKind,
    pub standardization: Standardizer,
    pub estimator: EstimatorDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorDocument {
    Dcn {
        dcn: DcnDocument,
        #[serde(default)]
        propensity: Option<PropensityDocument>,
        #[serde(default = "default_mc_samples")]
        mc_samples: usize,
    },
    Direct {
        network: StackDocument,
    },
    Knn {
        k: usize,
        features: Matrix,
        treatments: Vec<bool>,
        outcomes: Vec<f64>,
    },
}

impl ModelBundle {
    pub fn new(model: ModelKind, standardization: Standardizer, fitted: &FittedModel) -> Self {
        let estimator = match fitted {
            FittedModel::DcnPd {
                dcn,
                propensity,
                schedule,
                mc_samples,
            } => EstimatorDocument::Dcn {
                dcn: dcn.into(),
                propensity: Some(PropensityDocument::new(propensity, *schedule)),
                mc_samples: *mc_samples,
            },
            FittedModel::DcnFixed { dcn, .. } => EstimatorDocument::Dcn {
                dcn: dcn.into(),
                propensity: None,
                mc_samples: default_mc_samples(),
            },
            FittedModel::Direct(m) => EstimatorDocument::Direct { network: m.net().into() },
            FittedModel::Knn { train, k } => EstimatorDocument::Knn {
                k: *k,
                features: train.features().clone(),
                treatments: train.treatments().to_vec(),
                outcomes: train.outcomes().to_vec(),
            },
        };
        ModelBundle {
            schema_version: SCHEMA_VERSION,
            model,
            standardization,
            estimator,
        }
    }

    pub fn into_fitted(self) -> Result<FittedModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported schema_version {}", self.schema_version)));
        }
        let fitted = match (self.model, self.estimator) {
            (ModelKind::DcnPd, EstimatorDocument::Dcn { dcn, propensity: Some(p), mc_samples }) => {
                let (propensity, schedule) = p.into_parts()?;
                FittedModel::DcnPd {
                    dcn: dcn.try_into()?,
                    propensity,
                    schedule,
                    mc_samples,
                }
            }
            (ModelKind::DcnFixed(p), EstimatorDocument::Dcn { dcn, .. }) => FittedModel::DcnFixed {
                dropout: p,
                dcn: dcn.try_into()?,
            },
            (ModelKind::Nn4, EstimatorDocument::Direct { network }) => {
                FittedModel::Direct(DirectModel::from_net(network.try_into()?)?)
            }
            (ModelKind::Knn(k), EstimatorDocument::Knn { features, treatments, outcomes, .. }) => FittedModel::Knn {
                train: ObservationalDataset::new(features, treatments, outcomes)?,
                k,
            },
            (m, _) => return Err(Error::invalid(format!("bundle estimator does not match model `{m}`"))),
        };
        if fitted.input_dim() != self.standardization.dim() {
            return Err(Error::invalid("bundle standardization width does not match the model"));
        }
        Ok(fitted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ResponseSurface;

    #[test]
    fn ite_mse_cases() {
        assert_eq!(ite_mse(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(ite_mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        let truth = [0.3, -1.0, 4.0];
        let shifted: Vec<f64> = truth.iter().map(|t| t + 0.5).collect();
        assert!((ite_mse(&shifted, &truth).unwrap() - 0.25).abs() < 1e-15);
        assert!(ite_mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(ite_mse(&[], &[]).is_err());
    }

    #[test]
    fn model_spec_strings() {
        for s in ["dcn-pd", "dcn-fixed:0.2", "nn4", "knn:5"] {
            assert_eq!(s.parse::<ModelKind>().unwrap().to_string(), s);
        }
        assert_eq!("dcn-fixed:0.5".parse::<ModelKind>().unwrap(), ModelKind::DcnFixed(0.5));
        for bad in ["dcn", "knn:0", "knn:x", "dcn-fixed:1.0", "dcn-fixed:-0.1", "nn4:3"] {
            assert!(matches!(bad.parse::<ModelKind>(), Err(Error::Config(_))), "{bad}");
        }
        let json = serde_json::to_string(&ModelKind::Knn(3)).unwrap();
        assert_eq!(json, "\"knn:3\"");
    }

    #[test]
    fn seeds_depend_on_every_component() {
        let base = derive_seed(7, 3, Stream::Model);
        assert_ne!(base, derive_seed(8, 3, Stream::Model));
        assert_ne!(base, derive_seed(7, 4, Stream::Model));
        assert_ne!(base, derive_seed(7, 3, Stream::Split));
        assert_eq!(base, derive_seed(7, 3, Stream::Model));
    }

    #[test]
    fn aggregates() {
        let (m, se) = mean_and_std_err(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample sd = sqrt(5/3), se = sd / 2
        assert!((se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_and_std_err(&[2.0]), (2.0, 0.0));
    }

    fn synthetic(model: ModelKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            DataSource::Synthetic(SyntheticConfig {
                n: 120,
                d: 4,
                bias_strength: 1.0,
                noise_std: 0.5,
                surface: ResponseSurface::LinearOffset,
                seed: 0,
            }),
            model,
            99,
        );
        c.reps = 3;
        c.train.epochs = 4;
        c.train.arch.shared = vec![16, 16];
        c.train.arch.head = vec![8];
        c.direct.hidden = vec![16, 16, 16];
        c.propensity.epochs = 30;
        c.mc_samples = 10;
        c
    }

    #[test]
    fn config_validation() {
        let mut c = synthetic(ModelKind::DcnPd);
        assert!(c.validate().is_ok());
        c.reps = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = synthetic(ModelKind::DcnPd);
        c.train.gamma = 2.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = synthetic(ModelKind::DcnPd);
        c.train_fraction = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json("{}"), Err(Error::Config(_))));
        let json = r#"{"source":{"synthetic":{"n":50,"d":2,"bias_strength":1,"noise_std":1,"surface":"linear_offset"}},"model":"knn:3","seed":1}"#;
        let c = ExperimentConfig::from_json(json).unwrap();
        assert_eq!((c.reps, c.train_fraction, c.mc_samples), (100, 0.8, 100));
    }

    #[test]
    fn repetitions_are_paired_across_models() {
        let a = prepare_repetition(&synthetic(ModelKind::DcnPd), 1).unwrap();
        let b = prepare_repetition(&synthetic(ModelKind::Knn(3)), 1).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = prepare_repetition(&synthetic(ModelKind::DcnPd), 2).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn fixed_covariates_and_split() {
        let mut cfg = synthetic(ModelKind::Knn(3));
        cfg.fixed_covariates = true;
        cfg.fixed_split = true;
        let a = prepare_repetition(&cfg, 0).unwrap();
        let b = prepare_repetition(&cfg, 1).unwrap();
        // Same subjects, same split; only outcomes change.
        assert_eq!(a.train.treatments(), b.train.treatments());
        assert_eq!(a.train.features(), b.train.features());
        assert_ne!(a.train.outcomes(), b.train.outcomes());
    }

    #[test]
    fn train_fraction_is_honored() {
        let rep = prepare_repetition(&synthetic(ModelKind::Knn(3)), 0).unwrap();
        assert_eq!((rep.train.len(), rep.test.len()), (96, 24));
        let means = Standardizer::fit(rep.train.features()).unwrap().mean;
        assert!(means.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn every_model_runs_and_reports() {
        for spec in [ModelKind::DcnPd, ModelKind::DcnFixed(0.2), ModelKind::Nn4, ModelKind::Knn(3)] {
            let report = run_experiment(&synthetic(spec)).unwrap();
            report.validate().unwrap();
            assert_eq!(report.per_rep_mse.len(), 3);
            assert_eq!(report.model, spec);
        }
    }

    #[test]
    fn adding_repetitions_keeps_earlier_ones() {
        let mut cfg = synthetic(ModelKind::DcnFixed(0.2));
        let short = run_experiment(&cfg).unwrap();
        cfg.reps = 4;
        let long = run_experiment(&cfg).unwrap();
        assert_eq!(&long.per_rep_mse[..3], &short.per_rep_mse[..]);
    }

    #[test]
    fn missing_ground_truth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x1,w,y\n0,1,1\n1,0,2\n2,1,3\n3,0,4\n4,1,5\n").unwrap();
        let mut cfg = ExperimentConfig::new(
            DataSource::Csv {
                paths: vec![path],
                schema: None,
            },
            ModelKind::Knn(1),
            1,
        );
        cfg.reps = 1;
        match run_experiment(&cfg) {
            Err(Error::Repetition { index: 0, source }) => assert!(matches!(*source, Error::InvalidArgument(_))),
            other => panic!("expected repetition error, got {other:?}"),
        }
    }

    #[test]
    fn report_files_round_trip() {
        let report = ExperimentReport::from_mses(synthetic(ModelKind::Knn(3)), vec![0.1, 2.0 / 3.0, 1e-17], 1.5);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("new/sub");
        emit_report(&report, &out).unwrap();
        let back: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(out.join(REPORT_JSON)).unwrap()).unwrap();
        assert_eq!(back, report);
        let csv = read_repetitions_csv(out.join(REPORT_CSV)).unwrap();
        assert_eq!(csv, report.per_rep_mse);
        let (m, se) = mean_and_std_err(&csv);
        assert!(close(m, back.mean) && close(se, back.std_err));
    }

    #[test]
    fn bundles_round_trip_predictions() {
        let cfg = synthetic(ModelKind::DcnPd);
        let rep = prepare_repetition(&cfg, 0).unwrap();
        for spec in [ModelKind::DcnPd, ModelKind::DcnFixed(0.5), ModelKind::Nn4, ModelKind::Knn(2)] {
            let cfg = ExperimentConfig { model: spec, ..cfg.clone() };
            let fitted = fit_model(&cfg, &rep.train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let bundle = ModelBundle::new(spec, rep.standardizer.clone(), &fitted);
            let json = serde_json::to_string(&bundle).unwrap();
            let loaded = serde_json::from_str::<ModelBundle>(&json).unwrap().into_fitted().unwrap();
            let a = fitted.predict_ite(rep.test.features(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let b = loaded.predict_ite(rep.test.features(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(a, b, "{spec}");
        }
    }
}
