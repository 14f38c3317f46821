//! Fully connected network: tanh hidden layers, identity output.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::nn::{dropout_mask, glorot, mse_grad, train, Network, Optimizer, TrainSettings};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, TargetMatrix};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Rate applied to every hidden layer's output while training.
    pub dropout: f64,
    /// Targets are trained as `(y - target_offset) / target_scale`.
    pub target_offset: f64,
    pub target_scale: f64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden: vec![300, 150, 50],
            epochs: 500,
            batch_size: 30,
            optimizer: Optimizer::sgd(),
            dropout: 0.5,
            target_offset: 48.0,
            target_scale: 48.0,
        }
    }
}

impl MlpParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.target_scale > 0.0 && self.target_offset.is_finite()) {
            return Err(Error::invalid("target scaling must be finite with a positive scale"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Layer `l` maps width `sizes[l]` to `sizes[l + 1]`; weights are stored
/// `in x out` so a batch propagates as `Z W + 1 b^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DMatrix<f64>>,
    pub dropout: f64,
}

impl MlpNet {
    pub fn new(sizes: &[usize], dropout: f64, rng: &mut SplitMix64) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let vals = glorot(rng, w[0], w[1], w[0] * w[1]);
            weights.push(DMatrix::from_vec(w[0], w[1], vals));
            biases.push(DMatrix::zeros(1, w[1]));
        }
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            dropout,
        }
    }

    fn layers(&self) -> usize {
        self.weights.len()
    }
}

fn affine(z: &DMatrix<f64>, w: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = z * w;
    for mut row in a.row_iter_mut() {
        row += b;
    }
    a
}

impl Network for MlpNet {
    fn params(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for l in 0..self.layers() {
            z = affine(&z, &self.weights[l], &self.biases[l]);
            if l + 1 < self.layers() {
                z.apply(|v| *v = v.tanh());
            }
        }
        z
    }

    fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        mut dropout: Option<&mut SplitMix64>,
    ) -> (f64, Vec<Vec<f64>>) {
        let nl = self.layers();
        // inputs[l] feeds layer l; tanh outputs and masks belong to hidden layers.
        let mut inputs = Vec::with_capacity(nl);
        let mut acts = Vec::with_capacity(nl);
        let mut masks = Vec::with_capacity(nl);
        let mut z = x.clone();
        for l in 0..nl {
            let mut a = affine(&z, &self.weights[l], &self.biases[l]);
            inputs.push(z);
            if l + 1 < nl {
                a.apply(|v| *v = v.tanh());
                let mut out = a.clone();
                let mask = match dropout.as_deref_mut() {
                    Some(rng) if self.dropout > 0.0 => {
                        let m = DMatrix::from_vec(a.nrows(), a.ncols(), dropout_mask(rng, self.dropout, a.len()));
                        out.component_mul_assign(&m);
                        Some(m)
                    }
                    _ => None,
                };
                acts.push(a);
                masks.push(mask);
                z = out;
            } else {
                z = a;
            }
        }
        let (loss, mut delta) = mse_grad(&z, y);
        let mut grads = vec![Vec::new(); 2 * nl];
        for l in (0..nl).rev() {
            let gw = inputs[l].transpose() * &delta;
            let gb = DMatrix::from_fn(1, delta.ncols(), |_, j| delta.column(j).sum());
            grads[2 * l] = gw.as_slice().to_vec();
            grads[2 * l + 1] = gb.as_slice().to_vec();
            if l > 0 {
                let mut back = &delta * self.weights[l].transpose();
                if let Some(m) = &masks[l - 1] {
                    back.component_mul_assign(m);
                }
                back.zip_apply(&acts[l - 1], |d, h| *d *= 1.0 - h * h);
                delta = back;
            }
        }
        (loss, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub net: MlpNet,
    pub params: MlpParams,
    /// Training loss per epoch, in the scaled target space.
    pub history: Vec<f64>,
}

impl MlpModel {
    pub fn n_features(&self) -> usize {
        self.net.sizes[0]
    }
}

pub(crate) fn settings(params: &MlpParams, epochs: usize, batch_size: usize, dropout: f64) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size,
        optimizer: params.optimizer,
        dropout: dropout > 0.0,
        shuffle: true,
    }
}

pub(crate) fn scale_targets(y: &TargetMatrix, offset: f64, scale: f64) -> DMatrix<f64> {
    y.0.map(|v| (v - offset) / scale)
}

pub fn mlp_fit(x: &FeatureMatrix, y: &TargetMatrix, params: &MlpParams, seed: u64) -> Result<MlpModel> {
    params.validate()?;
    if x.nrows() != y.nrows() {
        return Err(Error::shape(format!("{} target rows", x.nrows()), y.nrows()));
    }
    let mut sizes = vec![x.ncols()];
    sizes.extend(&params.hidden);
    sizes.push(y.ncols());
    let mut rng = SplitMix64::new(seed);
    let mut net = MlpNet::new(&sizes, params.dropout, &mut rng);
    let ys = scale_targets(y, params.target_offset, params.target_scale);
    let s = settings(params, params.epochs, params.batch_size, params.dropout);
    let history = train(&mut net, &x.data, &ys, &s, &mut rng)?;
    Ok(MlpModel {
        net,
        params: params.clone(),
        history,
    })
}

pub fn mlp_predict(model: &MlpModel, xq: &FeatureMatrix) -> Result<TargetMatrix> {
    if xq.ncols() != model.n_features() {
        return Err(Error::shape(format!("{} feature columns", model.n_features()), xq.ncols()));
    }
    let out = model.net.forward(&xq.data);
    Ok(TargetMatrix(out.map(|v| v * model.params.target_scale + model.params.target_offset)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressors::nn::{numerical_gradient, relative_error};
    use crate::Provenance;

    #[test]
    fn zero_network_predicts_bias() {
        let mut rng = SplitMix64::new(0);
        let mut net = MlpNet::new(&[4, 6, 3], 0.0, &mut rng);
        net.params_mut().into_iter().for_each(|p| p.fill(0.0));
        net.biases[1].copy_from_slice(&[0.5, -1.0, 2.0]);
        let x = DMatrix::from_fn(5, 4, |i, j| (i * 4 + j) as f64);
        let out = net.forward(&x);
        for r in out.row_iter() {
            assert_eq!(r.iter().copied().collect::<Vec<_>>(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(4);
        let mut net = MlpNet::new(&[5, 7, 4, 3], 0.5, &mut rng);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.uniform(-1.0, 1.0));
        let y = DMatrix::from_fn(3, 3, |_, _| rng.uniform(-1.0, 1.0));
        let (_, analytic) = net.loss_and_gradient(&x, &y, None);
        let numeric = numerical_gradient(&mut net, &x, &y, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(a, n) < 1e-4, "{}", relative_error(a, n));
        }
    }

    #[test]
    fn dropout_gradient_uses_mask() {
        // With a fixed mask the loss is still differentiable; replaying the
        // same RNG state gives the same mask for each evaluation.
        let mut rng = SplitMix64::new(5);
        let net = MlpNet::new(&[3, 8, 2], 0.5, &mut rng);
        let x = DMatrix::from_fn(2, 3, |_, _| rng.uniform(-1.0, 1.0));
        let y = DMatrix::from_fn(2, 2, |_, _| rng.uniform(-1.0, 1.0));
        let seed = 77;
        let (_, g) = net.loss_and_gradient(&x, &y, Some(&mut SplitMix64::new(seed)));
        let eps = 1e-6;
        let mut up = net.clone();
        up.biases[1][(0, 0)] += eps;
        let mut down = net.clone();
        down.biases[1][(0, 0)] -= eps;
        let lu = up.loss_and_gradient(&x, &y, Some(&mut SplitMix64::new(seed))).0;
        let ld = down.loss_and_gradient(&x, &y, Some(&mut SplitMix64::new(seed))).0;
        assert!(((lu - ld) / (2.0 * eps) - g[3][0]).abs() < 1e-6);
    }

    #[test]
    fn linear_unit_recovers_slope() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0 - 1.0]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|r| vec![3.0 * r[0]]).collect();
        let params = MlpParams {
            hidden: vec![],
            epochs: 300,
            batch_size: 5,
            dropout: 0.0,
            target_offset: 0.0,
            target_scale: 1.0,
            ..MlpParams::default()
        };
        let m = mlp_fit(
            &FeatureMatrix::from_rows(&xs, Provenance::Raw),
            &TargetMatrix::from_rows(&ys),
            &params,
            1,
        )
        .unwrap();
        assert!((m.net.weights[0][(0, 0)] - 3.0).abs() < 1e-2);
        assert!(m.net.biases[0][(0, 0)].abs() < 1e-2);
    }

    #[test]
    fn loss_decreases_with_small_steps() {
        let mut rng = SplitMix64::new(6);
        let x = DMatrix::from_fn(24, 6, |_, _| rng.uniform(-1.0, 1.0));
        let y = DMatrix::from_fn(24, 2, |i, j| 40.0 + 10.0 * x[(i, j)] - 5.0 * x[(i, j + 2)]);
        let params = MlpParams {
            hidden: vec![8, 4],
            epochs: 50,
            batch_size: 24,
            optimizer: Optimizer::Sgd { lr: 0.01, momentum: 0.0 },
            dropout: 0.0,
            ..MlpParams::default()
        };
        let m = mlp_fit(&FeatureMatrix::new(x, Provenance::Raw), &TargetMatrix(y), &params, 2).unwrap();
        for w in m.history.windows(2) {
            assert!(w[1] <= w[0], "{w:?}");
        }
    }

    #[test]
    fn seeded_fits_are_identical() {
        let mut rng = SplitMix64::new(7);
        let x = FeatureMatrix::new(DMatrix::from_fn(10, 3, |_, _| rng.uniform(0.0, 1.0)), Provenance::Raw);
        let y = TargetMatrix(DMatrix::from_fn(10, 2, |_, _| rng.uniform(0.0, 96.0)));
        let params = MlpParams {
            hidden: vec![5],
            epochs: 5,
            batch_size: 3,
            ..MlpParams::default()
        };
        let a = mlp_fit(&x, &y, &params, 11).unwrap();
        let b = mlp_fit(&x, &y, &params, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let x = FeatureMatrix::from_rows(&[vec![1e3], vec![-1e3]], Provenance::Raw);
        let y = TargetMatrix::from_rows(&[vec![1e6], vec![-1e6]]);
        let params = MlpParams {
            hidden: vec![],
            epochs: 200,
            batch_size: 2,
            optimizer: Optimizer::Sgd { lr: 10.0, momentum: 0.0 },
            dropout: 0.0,
            target_offset: 0.0,
            target_scale: 1.0,
        };
        match mlp_fit(&x, &y, &params, 0) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
