//! CSV ingestion and emission.
//!
//! Default layout: one header row, columns `x1..xd, w, y` and optionally
//! `mu0, mu1`. Row numbers in errors are 1-based file lines (header = 1).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ObservationalDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which header names carry features, treatment, outcome and the optional
/// ground-truth means.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    #[serde(default)]
    pub mu0: Option<String>,
    #[serde(default)]
    pub mu1: Option<String>,
}

impl CsvSchema {
    /// `x1..xd, w, y` with `mu0, mu1` when `with_mu`.
    pub fn standard(d: usize, with_mu: bool) -> Self {
        CsvSchema {
            features: (1..=d).map(|j| format!("x{j}")).collect(),
            treatment: "w".into(),
            outcome: "y".into(),
            mu0: with_mu.then(|| "mu0".into()),
            mu1: with_mu.then(|| "mu1".into()),
        }
    }

    /// Infers the standard schema from a header: every `x<k>` column is a
    /// feature (ordered by `k`), and `mu0`/`mu1` are used when both exist.
    pub fn infer(headers: &[String]) -> Result<Self> {
        let mut feats: Vec<(usize, &String)> = headers
            .iter()
            .filter_map(|h| {
                h.strip_prefix('x')
                    .and_then(|k| k.parse::<usize>().ok())
                    .map(|k| (k, h))
            })
            .collect();
        if feats.is_empty() {
            return Err(Error::Schema("no feature columns named x1..xd".into()));
        }
        feats.sort();
        let has = |name: &str| headers.iter().any(|h| h == name);
        let with_mu = has("mu0") && has("mu1");
        Ok(CsvSchema {
            features: feats.into_iter().map(|(_, h)| h.clone()).collect(),
            treatment: "w".into(),
            outcome: "y".into(),
            mu0: with_mu.then(|| "mu0".into()),
            mu1: with_mu.then(|| "mu1".into()),
        })
    }
}

/// Reads a dataset; with `schema = None` the standard layout is inferred
/// from the header.
pub fn load_csv(path: impl AsRef<Path>, schema: Option<&CsvSchema>) -> Result<ObservationalDataset> {
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(::csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let inferred;
    let schema = match schema {
        Some(s) => s,
        None => {
            inferred = CsvSchema::infer(&headers)?;
            &inferred
        }
    };
    if schema.mu0.is_some() != schema.mu1.is_some() {
        return Err(Error::Schema("mu0 and mu1 must be given together".into()));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let feat_cols = schema.features.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;
    if feat_cols.is_empty() {
        return Err(Error::Schema("schema names no feature columns".into()));
    }
    let w_col = col(&schema.treatment)?;
    let y_col = col(&schema.outcome)?;
    let mu_cols = match (&schema.mu0, &schema.mu1) {
        (Some(a), Some(b)) => Some((col(a)?, col(b)?)),
        _ => None,
    };

    let d = feat_cols.len();
    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut mu0 = Vec::new();
    let mut mu1 = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).ok_or_else(|| Error::Parse {
                row: line,
                column: headers[c].clone(),
                message: "missing cell".into(),
            })?;
            raw.parse::<f64>().map_err(|e| Error::Parse {
                row: line,
                column: headers[c].clone(),
                message: format!("`{raw}`: {e}"),
            })
        };
        for &c in &feat_cols {
            x.push(cell(c)?);
        }
        let t = cell(w_col)?;
        w.push(match t {
            0.0 => false,
            1.0 => true,
            v => {
                return Err(Error::Validation {
                    row: line,
                    column: headers[w_col].clone(),
                    message: format!("treatment must be 0 or 1, got {v}"),
                })
            }
        });
        y.push(cell(y_col)?);
        if let Some((a, b)) = mu_cols {
            mu0.push(cell(a)?);
            mu1.push(cell(b)?);
        }
    }
    let n = w.len();
    let dataset = ObservationalDataset::new(Matrix::new(n, d, x)?, w, y)?;
    match mu_cols {
        Some(_) => dataset.with_potential_outcomes(mu0, mu1),
        None => Ok(dataset),
    }
}

/// Writes the standard layout. Values use the shortest representation that
/// parses back to the same `f64`.
pub fn save_csv(dataset: &ObservationalDataset, path: impl AsRef<Path>) -> Result<()> {
    let schema = CsvSchema::standard(dataset.dim(), dataset.mu0().is_some());
    let mut writer = ::csv::Writer::from_path(path.as_ref())?;
    let mut header = schema.features.clone();
    header.push(schema.treatment);
    header.push(schema.outcome);
    header.extend(schema.mu0);
    header.extend(schema.mu1);
    writer.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..dataset.len() {
        row.clear();
        row.extend(dataset.features().row(i).iter().map(|v| v.to_string()));
        row.push(if dataset.treatments()[i] { "1".into() } else { "0".into() });
        row.push(dataset.outcomes()[i].to_string());
        if let (Some(m0), Some(m1)) = (dataset.mu0(), dataset.mu1()) {
            row.push(m0[i].to_string());
            row.push(m1[i].to_string());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn handcrafted_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x1,x2,w,y\n0.1,2.5,1,3.25\n-1e-3,4,0,0.5\n7,8,1,-2\n");
        let d = load_csv(&p, None).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(d.features().as_slice(), &[0.1, 2.5, -1e-3, 4.0, 7.0, 8.0]);
        assert_eq!(d.treatments(), &[true, false, true]);
        assert_eq!(d.outcomes(), &[3.25, 0.5, -2.0]);
        assert!(d.true_ite().is_none());
    }

    #[test]
    fn treatment_outside_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x1,w,y\n0.1,1,3\n0.2,2,1\n");
        match load_csv(&p, None) {
            Err(Error::Validation { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "w");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x1,x2,w,y\n0.1,abc,1,3\n");
        match load_csv(&p, None) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "x2")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x1,w\n0.1,1\n");
        assert!(matches!(load_csv(&p, None), Err(Error::Schema(_))));
        let p = write(&dir, "b.csv", "a,b\n1,2\n");
        assert!(matches!(load_csv(&p, None), Err(Error::Schema(_))));
    }

    #[test]
    fn custom_schema_with_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "treat,yf,m0,m1,age\n1,5,1,4,30\n0,2,2,3,41\n");
        let schema = CsvSchema {
            features: vec!["age".into()],
            treatment: "treat".into(),
            outcome: "yf".into(),
            mu0: Some("m0".into()),
            mu1: Some("m1".into()),
        };
        let d = load_csv(&p, Some(&schema)).unwrap();
        assert_eq!(d.true_ite().unwrap(), vec![3.0, 1.0]);
        assert_eq!(d.features().as_slice(), &[30.0, 41.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_then_load_round_trips(
            rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 3), any::<bool>(), -1e3f64..1e3, -50f64..50.0, -50f64..50.0), 1..40)
        ) {
            let n = rows.len();
            let x = Matrix::new(n, 3, rows.iter().flat_map(|r| r.0.clone()).collect()).unwrap();
            let d = ObservationalDataset::new(x, rows.iter().map(|r| r.1).collect(), rows.iter().map(|r| r.2).collect())
                .unwrap()
                .with_potential_outcomes(rows.iter().map(|r| r.3).collect(), rows.iter().map(|r| r.4).collect())
                .unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.csv");
            save_csv(&d, &p).unwrap();
            prop_assert_eq!(load_csv(&p, None).unwrap(), d);
        }
    }
}
