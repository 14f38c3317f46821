use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Where the columns of a feature matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Raw,
    Lbp,
    Pca,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Raw => "raw",
            Provenance::Lbp => "lbp",
            Provenance::Pca => "pca",
        })
    }
}

/// `n_samples x n_features` design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: DMatrix<f64>,
    pub provenance: Provenance,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>, provenance: Provenance) -> Self {
        Self { data, provenance }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>], provenance: Provenance) -> Self {
        Self::new(rows_to_matrix(rows), provenance)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self::new(self.data.select_rows(rows.iter()), self.provenance)
    }
}

/// `n_samples x n_outputs` matrix of keypoint coordinates, columns ordered
/// `(x, y)` per keypoint slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix(pub DMatrix<f64>);

impl TargetMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self(rows_to_matrix(rows))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select_rows(rows.iter()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.map(f))
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    assert!(
        rows.iter().all(|r| r.len() == ncols),
        "all rows must have the same length"
    );
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}
