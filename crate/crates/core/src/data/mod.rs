//! Observational datasets: the `(X, W, Y)` tuples plus, when known, the
//! ground-truth potential-outcome means.

mod csv;
mod synthetic;

pub use self::csv::{load_csv, save_csv, CsvSchema};
pub use self::synthetic::{
    draw_covariates, generate_synthetic, simulate_outcomes, Covariates, Realization, ResponseSurface,
    SyntheticConfig, SyntheticDataset,
};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset {
    x: Matrix,
    w: Vec<bool>,
    y: Vec<f64>,
    mu: Option<(Vec<f64>, Vec<f64>)>,
}

impl ObservationalDataset {
    pub fn new(x: Matrix, w: Vec<bool>, y: Vec<f64>) -> Result<Self> {
        let n = x.rows();
        if w.len() != n || y.len() != n {
            return Err(Error::invalid(format!(
                "dataset columns disagree: {n} feature rows, {} treatments, {} outcomes",
                w.len(),
                y.len()
            )));
        }
        Ok(ObservationalDataset { x, w, y, mu: None })
    }

    /// Attaches ground-truth potential-outcome means.
    pub fn with_potential_outcomes(mut self, mu0: Vec<f64>, mu1: Vec<f64>) -> Result<Self> {
        if mu0.len() != self.len() || mu1.len() != self.len() {
            return Err(Error::invalid("potential-outcome columns must have one entry per subject"));
        }
        self.mu = Some((mu0, mu1));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn treatments(&self) -> &[bool] {
        &self.w
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn mu0(&self) -> Option<&[f64]> {
        self.mu.as_ref().map(|(m, _)| m.as_slice())
    }

    pub fn mu1(&self) -> Option<&[f64]> {
        self.mu.as_ref().map(|(_, m)| m.as_slice())
    }

    /// `mu1 - mu0`, when the potential-outcome means are known.
    pub fn true_ite(&self) -> Option<Vec<f64>> {
        self.mu
            .as_ref()
            .map(|(m0, m1)| m1.iter().zip(m0).map(|(a, b)| a - b).collect())
    }

    pub fn treated_count(&self) -> usize {
        self.w.iter().filter(|&&w| w).count()
    }

    /// Rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> ObservationalDataset {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        ObservationalDataset {
            x: self.x.select_rows(indices),
            w: indices.iter().map(|&i| self.w[i]).collect(),
            y: pick(&self.y),
            mu: self.mu.as_ref().map(|(m0, m1)| (pick(m0), pick(m1))),
        }
    }

    /// Same rows with features replaced (e.g. after standardization).
    pub fn with_features(&self, x: Matrix) -> Result<Self> {
        if x.rows() != self.len() {
            return Err(Error::invalid("replacement features have the wrong row count"));
        }
        Ok(ObservationalDataset { x, ..self.clone() })
    }
}

/// Per-feature affine transform `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per column; zero-variance
    /// columns record a std of 1 and map to all zeros.
    pub fn fit(x: &Matrix) -> Result<Self> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::invalid("cannot standardize an empty matrix"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / nf).collect();
        let mut var = vec![0.0; x.cols()];
        for r in 0..n {
            for ((v, xi), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *v += (xi - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / nf).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "standardizer fitted on {} features, got {}",
                self.dim(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            self.apply_in_place(out.row_mut(r));
        }
        Ok(out)
    }

    pub fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "standardizer fitted on {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        let mut v = x.to_vec();
        self.apply_in_place(&mut v);
        Ok(v)
    }

    fn apply_in_place(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Standardizes the features of `dataset`, returning the transform used.
pub fn standardize(dataset: &ObservationalDataset) -> Result<(ObservationalDataset, Standardizer)> {
    let scaler = Standardizer::fit(dataset.features())?;
    let x = scaler.apply(dataset.features())?;
    Ok((dataset.with_features(x)?, scaler))
}

/// Uniform shuffle, then the first `ceil(fraction * n)` rows go to training.
pub fn train_test_split<R: Rng + ?Sized>(
    dataset: &ObservationalDataset,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(ObservationalDataset, ObservationalDataset)> {
    let (train, test) = split_indices(dataset.len(), train_fraction, rng)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

pub fn split_indices<R: Rng + ?Sized>(
    n: usize,
    train_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    // The small slack keeps products like 0.7 * 10 = 7.000000000000001 at 7.
    let n_train = (train_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "split of {n} rows at {train_fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize) -> ObservationalDataset {
        let x = Matrix::new(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let w = (0..n).map(|i| i % 3 == 0).collect();
        let y = (0..n).map(|i| i as f64 * 0.5).collect();
        ObservationalDataset::new(x, w, y).unwrap()
    }

    #[test]
    fn two_point_standardization() {
        let x = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        assert_eq!(s.apply(&x).unwrap().as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = Matrix::from_rows(&[[4.0, 1.0], [4.0, 2.0], [4.0, 6.0]]).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        assert_eq!(s.std[0], 1.0);
        assert!(s.apply(&x).unwrap().column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transform_of_mean_is_zero() {
        let d = toy(7);
        let (_, s) = standardize(&d).unwrap();
        let z = s.apply_row(&s.mean).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = train_test_split(&toy(10), 0.8, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a, b) = split_indices(747, 0.8, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (598, 149));
        let (a, _) = split_indices(10, 0.7, &mut rng).unwrap();
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn split_is_seeded() {
        let a = split_indices(50, 0.8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = split_indices(50, 0.8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_rejects_empty_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(split_indices(1, 0.5, &mut rng).is_err());
        assert_eq!(split_indices(2, 0.1, &mut rng).unwrap().0.len(), 1);
        assert!(split_indices(10, 0.0, &mut rng).is_err());
        assert!(split_indices(10, 1.0, &mut rng).is_err());
        assert!(split_indices(3, 0.99, &mut rng).is_err());
    }

    #[test]
    fn column_length_mismatch() {
        assert!(ObservationalDataset::new(Matrix::zeros(2, 1), vec![true], vec![0.0, 1.0]).is_err());
        assert!(toy(3).with_potential_outcomes(vec![0.0; 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_indices(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok((train, test)) = split_indices(n, frac, &mut rng) {
                let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(train.len(), (frac * n as f64 - 1e-9).ceil() as usize);
            }
        }
    }
}
