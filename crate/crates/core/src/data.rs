//! Datasets and strict CSV ingestion.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("empty dataset: need at least one row")]
    Empty,

    #[error("feature names must be unique; `{0}` repeats")]
    DuplicateName(String),

    #[error("non-finite value in {place} at row {row}")]
    NonFinite { place: String, row: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("missing response column `{0}` in header")]
    MissingTarget(String),

    #[error("label column must hold small nonnegative integers; row {row} has {value}")]
    BadLabel { row: usize, value: f64 },
}

/// Response values attached to a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Continuous(DVector<f64>),
    Labels { labels: Vec<usize>, num_classes: usize },
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Response::Continuous(v) => v.len(),
            Response::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Continuous view; labels are exposed as their numeric values.
    pub fn as_vector(&self) -> DVector<f64> {
        match self {
            Response::Continuous(v) => v.clone(),
            Response::Labels { labels, .. } => {
                DVector::from_iterator(labels.len(), labels.iter().map(|&l| l as f64))
            }
        }
    }

    /// One-hot indicator matrix for labels; a 1-column matrix otherwise.
    pub fn as_target_matrix(&self) -> DMatrix<f64> {
        match self {
            Response::Continuous(v) => DMatrix::from_column_slice(v.len(), 1, v.as_slice()),
            Response::Labels { labels, num_classes } => {
                let mut m = DMatrix::zeros(labels.len(), *num_classes);
                for (i, &l) in labels.iter().enumerate() {
                    m[(i, l)] = 1.0;
                }
                m
            }
        }
    }
}

/// A feature matrix with a response and per-feature names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub response: Response,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        response: Response,
        feature_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if features.nrows() == 0 || response.is_empty() {
            return Err(DataError::Empty);
        }
        assert_eq!(features.nrows(), response.len(), "row count mismatch");
        assert_eq!(features.ncols(), feature_names.len(), "name count mismatch");
        let mut seen = std::collections::HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.clone()) {
                return Err(DataError::DuplicateName(name.clone()));
            }
        }
        for i in 0..features.nrows() {
            for j in 0..features.ncols() {
                if !features[(i, j)].is_finite() {
                    return Err(DataError::NonFinite {
                        place: format!("feature `{}`", feature_names[j]),
                        row: i,
                    });
                }
            }
        }
        if let Response::Continuous(y) = &response {
            for (i, v) in y.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        place: "response".to_string(),
                        row: i,
                    });
                }
            }
        }
        Ok(Dataset {
            features,
            response,
            feature_names,
        })
    }

    /// Regression dataset with auto-generated names `x1..xd`.
    pub fn regression(features: DMatrix<f64>, y: DVector<f64>) -> Result<Self, DataError> {
        let names = (1..=features.ncols()).map(|j| format!("x{j}")).collect();
        Dataset::new(features, Response::Continuous(y), names)
    }

    pub fn num_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Reinterprets a continuous response as integer class labels.
    pub fn into_classification(self) -> Result<Self, DataError> {
        let y = match &self.response {
            Response::Continuous(v) => v.clone(),
            Response::Labels { .. } => return Ok(self),
        };
        let mut labels = Vec::with_capacity(y.len());
        for (i, &v) in y.iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 || v > 1e6 {
                return Err(DataError::BadLabel { row: i, value: v });
            }
            labels.push(v as usize);
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        Ok(Dataset {
            features: self.features,
            response: Response::Labels { labels, num_classes },
            feature_names: self.feature_names,
        })
    }
}

/// Loads a strict CSV: header row required, every cell numeric and finite.
/// The response column is named `y` unless `target` overrides it.
pub fn load_csv(path: &Path, target: Option<&str>) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)?;
    let target = target.unwrap_or("y");
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| DataError::MissingTarget(target.to_string()))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(headers.len() - 1);
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("non-numeric cell `{cell}` in column `{}`", headers[j]),
            })?;
            if !value.is_finite() {
                return Err(DataError::Parse {
                    line,
                    msg: format!("non-finite cell `{cell}` in column `{}`", headers[j]),
                });
            }
            if j == target_idx {
                ys.push(value);
            } else {
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let d = headers.len() - 1;
    let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    Dataset::new(features, Response::Continuous(DVector::from_vec(ys)), names)
}

/// Renders an `f64` with 17 significant digits so that parsing the text
/// reproduces the exact bit pattern.
pub fn format_full(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the dataset as CSV with full-precision reals.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for name in &data.feature_names {
        out.push_str(name);
        out.push(',');
    }
    out.push_str("y\n");
    let y = data.response.as_vector();
    for i in 0..data.num_rows() {
        for j in 0..data.num_features() {
            let _ = write!(out, "{},", format_full(data.features[(i, j)]));
        }
        match &data.response {
            Response::Continuous(_) => {
                let _ = writeln!(out, "{}", format_full(y[i]));
            }
            Response::Labels { labels, .. } => {
                let _ = writeln!(out, "{}", labels[i]);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
