//! Principal component analysis.
//!
//! Fitting follows the classic recipe: centre the columns, form the
//! covariance matrix (`1/(n-1)` estimator), eigendecompose it, sort the
//! eigenpairs by decreasing eigenvalue and keep the leading ones. When the
//! feature count exceeds the sample count the `n x n` Gram matrix is
//! decomposed instead and its eigenvectors mapped back through the data,
//! which yields the same nonzero eigenpairs at a fraction of the cost.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Provenance};

const KIND: &str = "pca";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComponentSelector {
    /// Keep exactly this many components.
    Count(usize),
    /// Keep the fewest components whose cumulative explained ratio reaches
    /// the target, in (0, 1].
    VarianceTarget(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PcaOptions {
    /// Divide each centred column by its standard deviation before fitting.
    pub zscore: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    scale: Option<DVector<f64>>,
    /// `k x d`, orthonormal rows.
    components: DMatrix<f64>,
    explained_variance: Vec<f64>,
    explained_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn explained_ratio(&self) -> &[f64] {
        &self.explained_ratio
    }

    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_ratio.iter().sum()
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.components.ncols()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND, json!({ "zscore": self.scale.is_some() }));
        c.push_vector("mean", self.mean.as_slice());
        if let Some(s) = &self.scale {
            c.push_vector("scale", s.as_slice());
        }
        c.push_matrix("components", &self.components);
        c.push_vector("explained_variance", &self.explained_variance);
        c.push_vector("explained_ratio", &self.explained_ratio);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::Format(format!("expected a `{KIND}` container, got `{}`", c.kind)));
        }
        let zscore = c.meta["zscore"].as_bool().unwrap_or(false);
        let m = Self {
            mean: c.vector("mean")?,
            scale: if zscore { Some(c.vector("scale")?) } else { None },
            components: c.matrix("components")?,
            explained_variance: c.tensor("explained_variance")?.values.clone(),
            explained_ratio: c.tensor("explained_ratio")?.values.clone(),
        };
        if m.mean.len() != m.components.ncols()
            || m.explained_variance.len() != m.components.nrows()
        {
            return Err(Error::Format("inconsistent PCA tensor shapes".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

fn standardized(x: &DMatrix<f64>, mean: &DVector<f64>, scale: Option<&DVector<f64>>) -> DMatrix<f64> {
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        let s = scale.map_or(1.0, |s| s[j]);
        col.apply(|v| *v = (*v - mean[j]) / s);
    }
    c
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue; columns
/// of the returned matrix are the eigenvectors.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(order.iter());
    (values, vectors)
}

/// Flips `v` so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenpairs of the covariance of `xc` (already centred), largest first.
/// Returns `(eigenvalues, d x r eigenvectors)`; via the Gram matrix only the
/// pairs with a usable nonzero eigenvalue are returned.
fn covariance_eigen(xc: &DMatrix<f64>, use_gram: bool) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = xc.shape();
    let denom = (n - 1) as f64;
    if !use_gram {
        let cov = (xc.transpose() * xc) / denom;
        return sorted_eigen(cov);
    }
    let gram = (xc * xc.transpose()) / denom;
    let (values, u) = sorted_eigen(gram);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = top * 1e-12;
    let mut kept_values = Vec::new();
    let mut cols = Vec::new();
    for (i, &lambda) in values.iter().enumerate() {
        if lambda <= cutoff || lambda <= 0.0 {
            break;
        }
        let mut v = xc.transpose() * u.column(i);
        let norm = v.norm();
        if norm == 0.0 {
            break;
        }
        v /= norm;
        kept_values.push(lambda);
        cols.push(v);
    }
    let vectors = if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (kept_values, vectors)
}

pub fn fit_pca(x: &FeatureMatrix, selector: ComponentSelector) -> Result<PcaModel> {
    fit_pca_with(x, selector, PcaOptions::default())
}

pub fn fit_pca_with(x: &FeatureMatrix, selector: ComponentSelector, opts: PcaOptions) -> Result<PcaModel> {
    let (n, d) = (x.nrows(), x.ncols());
    fit_impl(&x.data, selector, opts, d > n)
}

fn fit_impl(
    x: &DMatrix<f64>,
    selector: ComponentSelector,
    opts: PcaOptions,
    use_gram: bool,
) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 samples, got {n}")));
    }
    if d == 0 {
        return Err(Error::invalid("PCA needs at least one feature"));
    }
    match selector {
        ComponentSelector::Count(k) if k == 0 || k > d => {
            return Err(Error::invalid(format!("component count {k} outside [1, {d}]")));
        }
        ComponentSelector::VarianceTarget(t) if !(t > 0.0 && t <= 1.0) => {
            return Err(Error::invalid(format!("variance target {t} outside (0, 1]")));
        }
        _ => {}
    }

    let mean = column_means(x);
    let scale = opts.zscore.then(|| {
        let denom = (n - 1) as f64;
        DVector::from_iterator(
            d,
            x.column_iter().enumerate().map(|(j, c)| {
                let var = c.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / denom;
                // Constant columns stay unscaled.
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            }),
        )
    });
    let xc = standardized(x, &mean, scale.as_ref());
    let total: f64 = xc.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;

    let (values, vectors) = covariance_eigen(&xc, use_gram);
    let available = vectors.ncols();

    let k = match selector {
        ComponentSelector::Count(k) => {
            if k > available {
                return Err(Error::invalid(format!(
                    "requested {k} components but the data only supports {available}"
                )));
            }
            k
        }
        ComponentSelector::VarianceTarget(target) => {
            if total <= 0.0 {
                return Err(Error::Numerical(
                    "data has zero variance; no component explains anything".into(),
                ));
            }
            let mut cum = 0.0;
            let mut chosen = None;
            for (i, &lambda) in values.iter().take(available).enumerate() {
                cum += lambda.max(0.0) / total;
                if cum >= target - 1e-12 {
                    chosen = Some(i + 1);
                    break;
                }
            }
            chosen.unwrap_or(available)
        }
    };

    let mut components = DMatrix::zeros(k, d);
    for i in 0..k {
        let mut v: Vec<f64> = vectors.column(i).iter().copied().collect();
        fix_sign(&mut v);
        components.row_mut(i).copy_from_slice(&v);
    }
    let explained_variance: Vec<f64> = values[..k].iter().map(|v| v.max(0.0)).collect();
    let explained_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        scale,
        components,
        explained_variance,
        explained_ratio,
    })
}

/// Projects rows onto the retained components: `(X - mean) * components^T`.
pub fn transform(m: &PcaModel, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.ncols() != m.n_features() {
        return Err(Error::shape(
            format!("{} feature columns", m.n_features()),
            format!("{} columns", x.ncols()),
        ));
    }
    let xc = standardized(&x.data, &m.mean, m.scale.as_ref());
    Ok(FeatureMatrix::new(xc * m.components.transpose(), Provenance::Pca))
}

/// Maps latent rows back to feature space: `Z * components + mean`.
pub fn inverse_transform(m: &PcaModel, z: &FeatureMatrix) -> Result<FeatureMatrix> {
    if z.ncols() != m.n_components() {
        return Err(Error::shape(
            format!("{} latent columns", m.n_components()),
            format!("{} columns", z.ncols()),
        ));
    }
    let mut x = &z.data * &m.components;
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let s = m.scale.as_ref().map_or(1.0, |s| s[j]);
        col.apply(|v| *v = *v * s + m.mean[j]);
    }
    Ok(FeatureMatrix::new(x, Provenance::Raw))
}

/// Transforms `x` and reshapes each latent row row-major into a
/// `side x side` grid.
pub fn to_grid(m: &PcaModel, x: &FeatureMatrix, side: usize) -> Result<Vec<DMatrix<f64>>> {
    if m.n_components() != side * side {
        return Err(Error::shape(
            format!("{} components for a {side}x{side} grid", side * side),
            format!("{} components", m.n_components()),
        ));
    }
    Ok(rows_to_grids(&transform(m, x)?, side))
}

pub fn rows_to_grids(z: &FeatureMatrix, side: usize) -> Vec<DMatrix<f64>> {
    assert_eq!(z.ncols(), side * side, "row length must be side^2");
    z.data
        .row_iter()
        .map(|r| DMatrix::from_row_iterator(side, side, r.iter().copied()))
        .collect()
}

pub fn flatten_grids(grids: &[DMatrix<f64>]) -> FeatureMatrix {
    let cols = grids.first().map_or(0, |g| g.len());
    let data = DMatrix::from_fn(grids.len(), cols, |i, j| {
        let side = grids[i].ncols();
        grids[i][(j / side, j % side)]
    });
    FeatureMatrix::new(data, Provenance::Pca)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use approx::assert_relative_eq;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, Provenance::Raw)
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = SplitMix64::new(seed);
        // Correlated columns so the spectrum is not flat.
        let mix = DMatrix::from_fn(d, d, |_, _| rng.uniform(-1.0, 1.0));
        let raw = DMatrix::from_fn(n, d, |_, j| rng.uniform(-1.0, 1.0) * (1.0 + j as f64));
        FeatureMatrix::new(raw * mix, Provenance::Raw)
    }

    fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
        let mean = column_means(x);
        let xc = standardized(x, &mean, None);
        (xc.transpose() * &xc) / (x.nrows() - 1) as f64
    }

    #[test]
    fn rank_one_data() {
        let x = fm(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 4.0], vec![-3.0, -6.0]]);
        let m = fit_pca(&x, ComponentSelector::VarianceTarget(0.999)).unwrap();
        assert_eq!(m.n_components(), 1);
        assert_relative_eq!(m.explained_ratio()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_by_two_closed_form() {
        let x = fm(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.1]]);
        let m = fit_pca(&x, ComponentSelector::Count(2)).unwrap();
        // Closed-form eigenpair of [[a, b], [b, c]].
        let (mx, my): (f64, f64) = (2.0, 6.1 / 3.0);
        let pts: [(f64, f64); 3] = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.1)];
        let a: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / 2.0;
        let b: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / 2.0;
        let c: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / 2.0;
        let l1 = (a + c) / 2.0 + (((a - c) / 2.0).powi(2) + b * b).sqrt();
        let l2 = (a + c) / 2.0 - (((a - c) / 2.0).powi(2) + b * b).sqrt();
        let (vx, vy) = (b, l1 - a);
        let norm = (vx * vx + vy * vy).sqrt();
        assert_relative_eq!(m.explained_variance()[0], l1, epsilon = 1e-12);
        assert_relative_eq!(m.explained_variance()[1], l2, epsilon = 1e-12);
        assert_relative_eq!(m.components()[(0, 0)], vx / norm, epsilon = 1e-10);
        assert_relative_eq!(m.components()[(0, 1)], vy / norm, epsilon = 1e-10);
        // Roughly the (0.707, 0.709) direction.
        let (dx, dy) = (0.707f64, 0.709f64);
        let cos = (m.components()[(0, 0)] * dx + m.components()[(0, 1)] * dy) / dx.hypot(dy);
        assert!(cos > 0.999, "cosine {cos}");
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let x = random_matrix(12, 30, 5);
        let cov = fit_impl(&x.data, ComponentSelector::Count(11), PcaOptions::default(), false).unwrap();
        let gram = fit_impl(&x.data, ComponentSelector::Count(11), PcaOptions::default(), true).unwrap();
        for i in 0..11 {
            assert_relative_eq!(
                cov.explained_variance()[i],
                gram.explained_variance()[i],
                max_relative = 1e-9
            );
            let dot = cov.components().row(i).dot(&gram.components().row(i));
            assert_relative_eq!(dot, 1.0, epsilon = 1e-8);
        }
        // Rank is n - 1 after centring.
        assert!(fit_impl(&x.data, ComponentSelector::Count(12), PcaOptions::default(), true).is_err());
    }

    #[test]
    fn eigen_residuals_and_orthonormality() {
        for seed in 0..5 {
            let x = random_matrix(100, 20, seed);
            let m = fit_pca(&x, ComponentSelector::Count(20)).unwrap();
            let c = covariance(&x.data);
            let cnorm = c.norm();
            for i in 0..20 {
                let v = m.components().row(i).transpose();
                let r = &c * &v - &v * m.explained_variance()[i];
                assert!(r.norm() <= 1e-6 * cnorm, "residual {}", r.norm());
            }
            let gram = m.components() * m.components().transpose();
            assert!((gram - DMatrix::identity(20, 20)).amax() <= 1e-8);
            assert!(m.explained_variance().windows(2).all(|w| w[0] >= w[1]));
            // Sum of all eigenvalues equals the covariance trace.
            assert_relative_eq!(
                m.explained_variance().iter().sum::<f64>(),
                c.trace(),
                max_relative = 1e-8
            );
        }
    }

    #[test]
    fn sign_convention() {
        let m = fit_pca(&random_matrix(40, 6, 2), ComponentSelector::Count(6)).unwrap();
        for row in m.components().row_iter() {
            let big = row.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn variance_target_picks_smallest_k() {
        let x = random_matrix(60, 10, 8);
        let full = fit_pca(&x, ComponentSelector::Count(10)).unwrap();
        for target in [0.5, 0.8, 0.95, 0.99, 1.0] {
            let m = fit_pca(&x, ComponentSelector::VarianceTarget(target)).unwrap();
            let k = m.n_components();
            let cum: f64 = full.explained_ratio()[..k].iter().sum();
            assert!(cum >= target - 1e-12);
            if k > 1 {
                let prev: f64 = full.explained_ratio()[..k - 1].iter().sum();
                assert!(prev < target);
            }
        }
    }

    #[test]
    fn zero_variance_with_target_fails() {
        let x = fm(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(fit_pca(&x, ComponentSelector::VarianceTarget(0.9)).is_err());
        assert!(fit_pca(&fm(&[vec![1.0]]), ComponentSelector::Count(1)).is_err());
    }

    #[test]
    fn transform_mean_row_is_zero() {
        let x = random_matrix(20, 5, 3);
        let m = fit_pca(&x, ComponentSelector::Count(3)).unwrap();
        let mean_row = FeatureMatrix::new(DMatrix::from_row_slice(1, 5, m.mean().as_slice()), Provenance::Raw);
        let z = transform(&m, &mean_row).unwrap();
        assert!(z.data.amax() < 1e-12);
        assert!(transform(&m, &fm(&[vec![1.0; 4]])).is_err());
    }

    #[test]
    fn full_rank_transform_is_isometry() {
        let x = random_matrix(30, 6, 4);
        let m = fit_pca(&x, ComponentSelector::Count(6)).unwrap();
        let z = transform(&m, &x).unwrap();
        let xc = standardized(&x.data, m.mean(), None);
        for i in 0..30 {
            assert_relative_eq!(z.data.row(i).norm(), xc.row(i).norm(), epsilon = 1e-8);
        }
        let back = inverse_transform(&m, &z).unwrap();
        assert!((back.data - &x.data).amax() <= 1e-6 * x.data.amax());
    }

    #[test]
    fn transform_matches_hand_product() {
        let x = random_matrix(8, 4, 6);
        let m = fit_pca(&x, ComponentSelector::Count(2)).unwrap();
        let z = transform(&m, &x).unwrap();
        for i in 0..8 {
            for c in 0..2 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += (x.data[(i, j)] - m.mean()[j]) * m.components()[(c, j)];
                }
                assert_relative_eq!(z.data[(i, c)], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_error_equals_discarded_variance() {
        let x = random_matrix(50, 8, 7);
        let full = fit_pca(&x, ComponentSelector::Count(8)).unwrap();
        let m = fit_pca(&x, ComponentSelector::Count(3)).unwrap();
        let rec = inverse_transform(&m, &transform(&m, &x).unwrap()).unwrap();
        let err = (&x.data - rec.data).norm_squared() / 49.0;
        let discarded: f64 = full.explained_variance()[3..].iter().sum();
        assert_relative_eq!(err, discarded, max_relative = 1e-6);
    }

    #[test]
    fn zero_latent_maps_to_mean() {
        let x = random_matrix(10, 4, 1);
        let m = fit_pca(&x, ComponentSelector::Count(2)).unwrap();
        let back = inverse_transform(&m, &fm(&[vec![0.0, 0.0]])).unwrap();
        assert!((back.data.row(0).transpose() - m.mean()).amax() < 1e-12);
        assert!(inverse_transform(&m, &fm(&[vec![0.0; 3]])).is_err());
    }

    #[test]
    fn projection_is_idempotent() {
        let x = random_matrix(25, 7, 11);
        let m = fit_pca(&x, ComponentSelector::Count(3)).unwrap();
        let once = inverse_transform(&m, &transform(&m, &x).unwrap()).unwrap();
        let twice = inverse_transform(&m, &transform(&m, &once).unwrap()).unwrap();
        assert!((once.data - twice.data).amax() < 1e-8);
    }

    #[test]
    fn grid_reshape() {
        let z = fm(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let g = rows_to_grids(&z, 2);
        assert_eq!(g[0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(flatten_grids(&g).data, z.data);

        let x = random_matrix(30, 20, 2);
        let m = fit_pca(&x, ComponentSelector::Count(16)).unwrap();
        let grids = to_grid(&m, &x, 4).unwrap();
        assert_eq!(grids.len(), 30);
        assert_eq!(flatten_grids(&grids).data, transform(&m, &x).unwrap().data);
        assert!(to_grid(&m, &x, 3).is_err());
    }

    #[test]
    fn zscore_option_round_trips() {
        let x = random_matrix(30, 5, 12);
        let m = fit_pca_with(&x, ComponentSelector::Count(5), PcaOptions { zscore: true }).unwrap();
        let back = inverse_transform(&m, &transform(&m, &x).unwrap()).unwrap();
        assert!((back.data - &x.data).amax() < 1e-8);
        // Standardized data: trace equals the column count.
        assert_relative_eq!(m.explained_variance().iter().sum::<f64>(), 5.0, max_relative = 1e-10);
    }

    #[test]
    fn container_round_trip() {
        let x = random_matrix(15, 6, 13);
        let m = fit_pca_with(&x, ComponentSelector::Count(4), PcaOptions { zscore: true }).unwrap();
        let mut buf = Vec::new();
        m.to_container().write_to(&mut buf).unwrap();
        let back = PcaModel::from_container(&Container::read_from(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
