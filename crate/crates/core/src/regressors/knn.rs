use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, TargetMatrix};

/// Brute-force k-nearest-neighbour regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    k: usize,
    n_features: usize,
    /// Training rows, row-major.
    rows: Vec<f64>,
    targets: DMatrix<f64>,
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_train(&self) -> usize {
        self.targets.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub(crate) fn parts(&self) -> (&[f64], &DMatrix<f64>) {
        (&self.rows, &self.targets)
    }

    pub(crate) fn from_parts(k: usize, rows: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        knn_fit(&FeatureMatrix::new(rows, crate::Provenance::Raw), &TargetMatrix(targets), k)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n_features..(i + 1) * self.n_features]
    }
}

pub fn knn_fit(x: &FeatureMatrix, y: &TargetMatrix, k: usize) -> Result<KnnModel> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::shape(format!("{} target rows", x.nrows()), y.nrows()));
    }
    if k > x.nrows() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} training rows",
            x.nrows()
        )));
    }
    let rows = x.data.transpose().as_slice().to_vec();
    Ok(KnnModel {
        k,
        n_features: x.ncols(),
        rows,
        targets: y.0.clone(),
    })
}

/// Averages the targets of the `k` Euclidean-nearest training rows. Equal
/// distances are resolved in favour of the lower training index.
pub fn knn_predict(model: &KnnModel, xq: &FeatureMatrix) -> Result<TargetMatrix> {
    if xq.ncols() != model.n_features {
        return Err(Error::shape(
            format!("{} feature columns", model.n_features),
            xq.ncols(),
        ));
    }
    let n = model.n_train();
    let m = model.targets.ncols();
    let queries = xq.data.transpose();
    let mut out = DMatrix::zeros(xq.nrows(), m);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (qi, q) in queries.column_iter().enumerate() {
        let q = q.as_slice();
        dist.clear();
        dist.extend((0..n).map(|i| {
            let d: f64 = model
                .row(i)
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d, i)
        }));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if model.k < n {
            dist.select_nth_unstable_by(model.k - 1, cmp);
        }
        // Accumulate nearest first so results do not depend on selection order.
        dist[..model.k].sort_unstable_by(cmp);
        for &(_, i) in &dist[..model.k] {
            for j in 0..m {
                out[(qi, j)] += model.targets[(i, j)];
            }
        }
        for j in 0..m {
            out[(qi, j)] /= model.k as f64;
        }
    }
    Ok(TargetMatrix(out))
}
