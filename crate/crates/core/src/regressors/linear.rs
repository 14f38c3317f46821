//! Ordinary least squares, ridge, lasso and elastic net.
//!
//! Every fit centres the features and targets first, so the intercept is
//! recovered from the means and is never penalized.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, TargetMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `d x m`.
    pub weights: DMatrix<f64>,
    /// One per output.
    pub intercept: DVector<f64>,
    /// False when an iterative solver stopped at its iteration cap.
    pub converged: bool,
    /// Coordinate-descent sweeps used per output (empty for closed forms).
    pub iterations: Vec<usize>,
}

impl LinearModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Result<TargetMatrix> {
        if x.ncols() != self.weights.nrows() {
            return Err(Error::shape(
                format!("{} feature columns", self.weights.nrows()),
                x.ncols(),
            ));
        }
        let mut out = &x.data * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.intercept.transpose();
        }
        Ok(TargetMatrix(out))
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

struct Centered {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    x_mean: DVector<f64>,
    y_mean: DVector<f64>,
}

fn center(x: &FeatureMatrix, y: &TargetMatrix) -> Result<Centered> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape(format!("{} target rows", x.nrows()), y.nrows()));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot fit on zero rows"));
    }
    let x_mean = x.data.row_mean().transpose();
    let y_mean = y.0.row_mean().transpose();
    let mut xc = x.data.clone();
    for mut row in xc.row_iter_mut() {
        row -= x_mean.transpose();
    }
    let mut yc = y.0.clone();
    for mut row in yc.row_iter_mut() {
        row -= y_mean.transpose();
    }
    Ok(Centered {
        x: xc,
        y: yc,
        x_mean,
        y_mean,
    })
}

fn finish(c: &Centered, weights: DMatrix<f64>, converged: bool, iterations: Vec<usize>) -> LinearModel {
    let intercept = &c.y_mean - weights.transpose() * &c.x_mean;
    LinearModel {
        weights,
        intercept,
        converged,
        iterations,
    }
}

/// Above this many matrix entries a wide problem is solved through the
/// eigendecomposition of its `n x n` Gram matrix instead of a full SVD.
const GRAM_ROUTE_MIN_ENTRIES: usize = 2_000_000;

/// Spectral ridge solve `V diag(s / (s^2 + lambda)) U^T Y`; singular values
/// below the rank tolerance are dropped, giving the minimum-norm least
/// squares solution at `lambda = 0`.
fn spectral_solve(xc: &DMatrix<f64>, yc: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let (n, d) = xc.shape();
    if d > n && n * d >= GRAM_ROUTE_MIN_ENTRIES {
        return gram_solve(xc, yc, lambda);
    }
    let svd = SVD::try_new(xc.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let s_max = svd.singular_values.max();
    let tol = s_max * n.max(d) as f64 * f64::EPSILON;
    let uty = u.transpose() * yc;
    let mut scaled = uty;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let f = if s > tol { s / (s * s + lambda) } else { 0.0 };
        scaled.row_mut(i).scale_mut(f);
    }
    Ok(v_t.transpose() * scaled)
}

/// Same solve for `d > n`: with `K = X X^T = U diag(mu) U^T`,
/// `W = X^T U diag(1 / (mu + lambda)) U^T Y`.
fn gram_solve(xc: &DMatrix<f64>, yc: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let gram = xc * xc.transpose();
    let eig = SymmetricEigen::new(gram);
    let mu_max = eig.eigenvalues.max().max(0.0);
    // Squaring the spectrum leaves null directions at ~eps * mu_max, so the
    // cutoff has to sit well above that.
    let tol = mu_max * 1e-10;
    let mut coef = eig.eigenvectors.transpose() * yc;
    for (i, &mu) in eig.eigenvalues.iter().enumerate() {
        let f = if mu > tol { 1.0 / (mu + lambda) } else { 0.0 };
        coef.row_mut(i).scale_mut(f);
    }
    Ok(xc.transpose() * (&eig.eigenvectors * coef))
}

/// Least squares with intercept; minimum-norm when rank deficient.
pub fn ols_fit(x: &FeatureMatrix, y: &TargetMatrix) -> Result<LinearModel> {
    ridge_fit(x, y, 0.0)
}

/// Minimizes `||Y - XW - 1b^T||^2 + lambda ||W||^2`.
pub fn ridge_fit(x: &FeatureMatrix, y: &TargetMatrix, lambda: f64) -> Result<LinearModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("ridge lambda {lambda} must be finite and >= 0")));
    }
    let c = center(x, y)?;
    let w = spectral_solve(&c.x, &c.y, lambda)?;
    Ok(finish(&c, w, true, Vec::new()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdSettings {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CdSettings {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tol: 1e-4,
        }
    }
}

/// Lasso: `(1/2n)||y - Xw||^2 + alpha ||w||_1`, per output column.
pub fn lasso_fit(x: &FeatureMatrix, y: &TargetMatrix, alpha: f64, cd: CdSettings) -> Result<LinearModel> {
    elastic_fit(x, y, alpha, 1.0, cd)
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Elastic net:
/// `(1/2n)||y - Xw||^2 + alpha rho ||w||_1 + alpha (1 - rho)/2 ||w||^2`,
/// solved by cyclic coordinate descent until the largest coefficient change
/// in a sweep drops below `tol`.
pub fn elastic_fit(
    x: &FeatureMatrix,
    y: &TargetMatrix,
    alpha: f64,
    rho: f64,
    cd: CdSettings,
) -> Result<LinearModel> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha {alpha} must be finite and >= 0")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho {rho} outside [0, 1]")));
    }
    if cd.max_iter == 0 || !(cd.tol > 0.0) {
        return Err(Error::invalid("coordinate descent needs max_iter >= 1 and tol > 0"));
    }
    let c = center(x, y)?;
    let (n, d) = c.x.shape();
    let nf = n as f64;
    let l1 = alpha * rho;
    let l2 = alpha * (1.0 - rho);
    let col_sq: Vec<f64> = c.x.column_iter().map(|col| col.norm_squared() / nf).collect();

    let mut weights = DMatrix::zeros(d, c.y.ncols());
    let mut all_converged = true;
    let mut iterations = Vec::with_capacity(c.y.ncols());
    for out in 0..c.y.ncols() {
        let mut w = vec![0.0; d];
        let mut resid: Vec<f64> = c.y.column(out).iter().copied().collect();
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < cd.max_iter {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for j in 0..d {
                let denom = col_sq[j] + l2;
                if denom == 0.0 {
                    continue;
                }
                let col = c.x.column(j);
                let col = col.as_slice();
                let old = w[j];
                // rho_j = x_j^T (r + x_j w_j) / n
                let dot: f64 = col.iter().zip(&resid).map(|(a, r)| a * r).sum();
                let z = dot / nf + col_sq[j] * old;
                let new = soft_threshold(z, l1) / denom;
                if new != old {
                    let delta = new - old;
                    for (r, a) in resid.iter_mut().zip(col) {
                        *r -= a * delta;
                    }
                    w[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < cd.tol {
                converged = true;
                break;
            }
        }
        all_converged &= converged;
        iterations.push(sweeps);
        weights.column_mut(out).copy_from_slice(&w);
    }
    Ok(finish(&c, weights, all_converged, iterations))
}

/// Value of the elastic-net objective for one output column.
pub fn elastic_objective(x: &FeatureMatrix, y: &[f64], w: &[f64], b: f64, alpha: f64, rho: f64) -> f64 {
    let n = x.nrows() as f64;
    let mut sse = 0.0;
    for i in 0..x.nrows() {
        let pred: f64 = b + (0..x.ncols()).map(|j| x.data[(i, j)] * w[j]).sum::<f64>();
        sse += (y[i] - pred).powi(2);
    }
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2: f64 = w.iter().map(|v| v * v).sum();
    sse / (2.0 * n) + alpha * rho * l1 + alpha * (1.0 - rho) / 2.0 * l2
}
