//! Small convolutional network over square single-channel grids:
//! conv -> ReLU -> pool -> dropout, twice, then a tanh dense layer and a
//! linear output.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mlp::scale_targets;
use super::nn::{dropout_mask, glorot, mse_grad, train, Network, Optimizer, TrainSettings};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, TargetMatrix};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub dense: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub target_offset: f64,
    pub target_scale: f64,
}

impl Default for CnnParams {
    fn default() -> Self {
        Self {
            conv1_filters: 32,
            conv1_kernel: 5,
            conv2_filters: 8,
            conv2_kernel: 3,
            dense: 100,
            conv_dropout: 0.25,
            dense_dropout: 0.5,
            epochs: 400,
            batch_size: 50,
            optimizer: Optimizer::sgd(),
            target_offset: 48.0,
            target_scale: 48.0,
        }
    }
}

impl CnnParams {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.conv1_filters, self.conv2_filters, self.dense, self.epochs, self.batch_size];
        if sizes.contains(&0) {
            return Err(Error::invalid("CNN layer sizes, epochs and batch size must be positive"));
        }
        if self.conv1_kernel.is_multiple_of(2) || self.conv2_kernel.is_multiple_of(2) {
            return Err(Error::invalid("same padding needs odd kernel sizes"));
        }
        for rate in [self.conv_dropout, self.dense_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid(format!("dropout {rate} outside [0, 1)")));
            }
        }
        if !(self.target_scale > 0.0 && self.target_offset.is_finite()) {
            return Err(Error::invalid("target scaling must be finite with a positive scale"));
        }
        self.optimizer.validate()
    }
}

/// Same-padded cross-correlation. `input` is `cin x h x w`, `weights` is
/// `cout x cin x k x k`; returns `cout x h x w`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_same(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.fill(bias[o]);
        for i in 0..cin {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let dy = ky as isize - p;
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let wv = weights[((o * cin + i) * k + ky) * k + kx];
                    let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy) as usize);
                    let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * w..(sy + 1) * w];
                        let drow = &mut plane[y * w..(y + 1) * w];
                        for x in x0..x1 {
                            drow[x] += wv * srow[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight, bias and input gradients of [`conv2d_same`].
#[allow(clippy::too_many_arguments)]
fn conv2d_same_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    k: usize,
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    din: Option<&mut [f64]>,
) {
    let p = (k / 2) as isize;
    let mut din = din;
    for o in 0..cout {
        let g = &dout[o * h * w..(o + 1) * h * w];
        db[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let dy = ky as isize - p;
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy) as usize);
                    let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx) as usize);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            let gv = g[y * w + x];
                            acc += gv * src[sy * w + sx];
                            if let Some(d) = din.as_deref_mut() {
                                d[i * h * w + sy * w + sx] += wv * gv;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling; returns the pooled planes and, per output,
/// the flat input index that won (first in scan order on ties).
fn maxpool2(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = usize::MAX;
                let mut val = f64::NEG_INFINITY;
                for (yy, xx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * y + yy) * w + 2 * x + xx;
                    if best == usize::MAX || input[idx] > val {
                        best = idx;
                        val = input[idx];
                    }
                }
                out.push(val);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnNet {
    pub side: usize,
    pub outputs: usize,
    pub c1: usize,
    pub k1: usize,
    pub c2: usize,
    pub k2: usize,
    pub dense: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `flat x dense`.
    pub w3: DMatrix<f64>,
    pub b3: DMatrix<f64>,
    /// `dense x outputs`.
    pub w4: DMatrix<f64>,
    pub b4: DMatrix<f64>,
}

/// Per-sample intermediate values kept for the backward pass.
struct Trace {
    conv1: Vec<f64>,
    arg1: Vec<usize>,
    mask1: Option<Vec<f64>>,
    pool1: Vec<f64>,
    conv2: Vec<f64>,
    arg2: Vec<usize>,
    mask2: Option<Vec<f64>>,
}

impl CnnNet {
    pub fn new(side: usize, outputs: usize, p: &CnnParams, rng: &mut SplitMix64) -> Result<Self> {
        if side == 0 || !side.is_multiple_of(4) {
            return Err(Error::invalid(format!("grid side {side} must be a positive multiple of 4")));
        }
        let (c1, k1, c2, k2, dense) = (p.conv1_filters, p.conv1_kernel, p.conv2_filters, p.conv2_kernel, p.dense);
        let flat = c2 * (side / 4) * (side / 4);
        Ok(Self {
            side,
            outputs,
            c1,
            k1,
            c2,
            k2,
            dense,
            conv_dropout: p.conv_dropout,
            dense_dropout: p.dense_dropout,
            w1: glorot(rng, k1 * k1, c1 * k1 * k1, c1 * k1 * k1),
            b1: vec![0.0; c1],
            w2: glorot(rng, c1 * k2 * k2, c2 * k2 * k2, c2 * c1 * k2 * k2),
            b2: vec![0.0; c2],
            w3: DMatrix::from_vec(flat, dense, glorot(rng, flat, dense, flat * dense)),
            b3: DMatrix::zeros(1, dense),
            w4: DMatrix::from_vec(dense, outputs, glorot(rng, dense, outputs, dense * outputs)),
            b4: DMatrix::zeros(1, outputs),
        })
    }

    pub fn flat_width(&self) -> usize {
        self.c2 * (self.side / 4) * (self.side / 4)
    }

    fn features(&self, grid: &[f64], mut dropout: Option<&mut SplitMix64>) -> (Vec<f64>, Trace) {
        let s = self.side;
        let mut conv1 = conv2d_same(grid, 1, s, s, &self.w1, &self.b1, self.c1, self.k1);
        conv1.iter_mut().for_each(|v| *v = v.max(0.0));
        let (mut pool1, arg1) = maxpool2(&conv1, self.c1, s, s);
        let mask1 = match dropout.as_deref_mut() {
            Some(rng) if self.conv_dropout > 0.0 => {
                let m = dropout_mask(rng, self.conv_dropout, pool1.len());
                pool1.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            }
            _ => None,
        };
        let h = s / 2;
        let mut conv2 = conv2d_same(&pool1, self.c1, h, h, &self.w2, &self.b2, self.c2, self.k2);
        conv2.iter_mut().for_each(|v| *v = v.max(0.0));
        let (mut pool2, arg2) = maxpool2(&conv2, self.c2, h, h);
        let mask2 = match dropout {
            Some(rng) if self.conv_dropout > 0.0 => {
                let m = dropout_mask(rng, self.conv_dropout, pool2.len());
                pool2.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                Some(m)
            }
            _ => None,
        };
        (
            pool2,
            Trace {
                conv1,
                arg1,
                mask1,
                pool1,
                conv2,
                arg2,
                mask2,
            },
        )
    }

    fn check_input(&self, x: &DMatrix<f64>) {
        assert_eq!(x.ncols(), self.side * self.side, "grid width");
    }
}

fn add_bias(mut a: DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    for mut row in a.row_iter_mut() {
        row += b;
    }
    a
}

impl Network for CnnNet {
    fn params(&self) -> Vec<&[f64]> {
        vec![
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            self.w3.as_slice(),
            self.b3.as_slice(),
            self.w4.as_slice(),
            self.b4.as_slice(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            self.w3.as_mut_slice(),
            self.b3.as_mut_slice(),
            self.w4.as_mut_slice(),
            self.b4.as_mut_slice(),
        ]
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.check_input(x);
        let xt = x.transpose();
        let mut flat = DMatrix::zeros(x.nrows(), self.flat_width());
        for (i, col) in xt.column_iter().enumerate() {
            let grid: Vec<f64> = col.iter().copied().collect();
            let (f, _) = self.features(&grid, None);
            flat.row_mut(i).copy_from_slice(&f);
        }
        let hidden = add_bias(&flat * &self.w3, &self.b3).map(f64::tanh);
        add_bias(&hidden * &self.w4, &self.b4)
    }

    fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        mut dropout: Option<&mut SplitMix64>,
    ) -> (f64, Vec<Vec<f64>>) {
        self.check_input(x);
        let n = x.nrows();
        let s = self.side;
        let h = s / 2;
        let xt = x.transpose();
        let mut grids = Vec::with_capacity(n);
        let mut traces = Vec::with_capacity(n);
        let mut flat = DMatrix::zeros(n, self.flat_width());
        for (i, col) in xt.column_iter().enumerate() {
            let grid: Vec<f64> = col.iter().copied().collect();
            let (f, t) = self.features(&grid, dropout.as_deref_mut());
            flat.row_mut(i).copy_from_slice(&f);
            grids.push(grid);
            traces.push(t);
        }
        let act = add_bias(&flat * &self.w3, &self.b3).map(f64::tanh);
        let mut hidden = act.clone();
        let mask3 = match dropout {
            Some(rng) if self.dense_dropout > 0.0 => {
                let m = DMatrix::from_vec(n, self.dense, dropout_mask(rng, self.dense_dropout, n * self.dense));
                hidden.component_mul_assign(&m);
                Some(m)
            }
            _ => None,
        };
        let out = add_bias(&hidden * &self.w4, &self.b4);
        let (loss, d_out) = mse_grad(&out, y);

        let col_sums = |m: &DMatrix<f64>| DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum());
        let gw4 = hidden.transpose() * &d_out;
        let gb4 = col_sums(&d_out);
        let mut d_hidden = &d_out * self.w4.transpose();
        if let Some(m) = &mask3 {
            d_hidden.component_mul_assign(m);
        }
        d_hidden.zip_apply(&act, |d, a| *d *= 1.0 - a * a);
        let gw3 = flat.transpose() * &d_hidden;
        let gb3 = col_sums(&d_hidden);
        let d_flat = &d_hidden * self.w3.transpose();

        let mut gw1 = vec![0.0; self.w1.len()];
        let mut gb1 = vec![0.0; self.c1];
        let mut gw2 = vec![0.0; self.w2.len()];
        let mut gb2 = vec![0.0; self.c2];
        for (i, t) in traces.iter().enumerate() {
            let mut d_pool2: Vec<f64> = d_flat.row(i).iter().copied().collect();
            if let Some(m) = &t.mask2 {
                d_pool2.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            let mut d_conv2 = vec![0.0; t.conv2.len()];
            for (d, &a) in d_pool2.iter().zip(&t.arg2) {
                if t.conv2[a] > 0.0 {
                    d_conv2[a] += d;
                }
            }
            let mut d_pool1 = vec![0.0; t.pool1.len()];
            conv2d_same_backward(
                &t.pool1,
                self.c1,
                h,
                h,
                &self.w2,
                self.c2,
                self.k2,
                &d_conv2,
                &mut gw2,
                &mut gb2,
                Some(&mut d_pool1),
            );
            if let Some(m) = &t.mask1 {
                d_pool1.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
            }
            let mut d_conv1 = vec![0.0; t.conv1.len()];
            for (d, &a) in d_pool1.iter().zip(&t.arg1) {
                if t.conv1[a] > 0.0 {
                    d_conv1[a] += d;
                }
            }
            conv2d_same_backward(
                &grids[i], 1, s, s, &self.w1, self.c1, self.k1, &d_conv1, &mut gw1, &mut gb1, None,
            );
        }
        (
            loss,
            vec![
                gw1,
                gb1,
                gw2,
                gb2,
                gw3.as_slice().to_vec(),
                gb3.as_slice().to_vec(),
                gw4.as_slice().to_vec(),
                gb4.as_slice().to_vec(),
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub net: CnnNet,
    pub params: CnnParams,
    pub history: Vec<f64>,
}

fn grid_side(cols: usize) -> Result<usize> {
    let side = (cols as f64).sqrt().round() as usize;
    if side * side != cols {
        return Err(Error::invalid(format!("{cols} columns do not form a square grid")));
    }
    Ok(side)
}

/// Each row of `grids` is one square grid flattened row-major.
pub fn cnn_fit(grids: &FeatureMatrix, y: &TargetMatrix, params: &CnnParams, seed: u64) -> Result<CnnModel> {
    params.validate()?;
    if grids.nrows() != y.nrows() {
        return Err(Error::shape(format!("{} target rows", grids.nrows()), y.nrows()));
    }
    let side = grid_side(grids.ncols())?;
    let mut rng = SplitMix64::new(seed);
    let mut net = CnnNet::new(side, y.ncols(), params, &mut rng)?;
    let ys = scale_targets(y, params.target_offset, params.target_scale);
    let s = TrainSettings {
        epochs: params.epochs,
        batch_size: params.batch_size,
        optimizer: params.optimizer,
        dropout: params.conv_dropout > 0.0 || params.dense_dropout > 0.0,
        shuffle: true,
    };
    let history = train(&mut net, &grids.data, &ys, &s, &mut rng)?;
    Ok(CnnModel {
        net,
        params: params.clone(),
        history,
    })
}

pub fn cnn_predict(model: &CnnModel, grids: &FeatureMatrix) -> Result<TargetMatrix> {
    let side = model.net.side;
    if grids.ncols() != side * side {
        return Err(Error::shape(format!("{} grid cells", side * side), grids.ncols()));
    }
    let out = model.net.forward(&grids.data);
    Ok(TargetMatrix(out.map(|v| v * model.params.target_scale + model.params.target_offset)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressors::nn::{numerical_gradient, relative_error};
    use crate::Provenance;

    #[test]
    fn delta_filter_shifts_grid() {
        let mut rng = SplitMix64::new(1);
        let grid: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for (ky, kx) in [(2, 2), (0, 4), (3, 1)] {
            let mut w = vec![0.0; 25];
            w[ky * 5 + kx] = 1.0;
            let out = conv2d_same(&grid, 1, 8, 8, &w, &[0.0], 1, 5);
            for y in 2..6 {
                for x in 2..6 {
                    let sy = y + ky - 2;
                    let sx = x + kx - 2;
                    assert_eq!(out[y * 8 + x], grid[sy * 8 + sx]);
                }
            }
        }
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let mut rng = SplitMix64::new(2);
        let mut net = CnnNet::new(8, 2, &CnnParams::default(), &mut rng).unwrap();
        net.params_mut().into_iter().for_each(|p| p.fill(0.0));
        net.b4.copy_from_slice(&[0.25, -3.0]);
        let x = DMatrix::from_fn(3, 64, |_, _| rng.uniform(0.0, 1.0));
        for r in net.forward(&x).row_iter() {
            assert_eq!(r.iter().copied().collect::<Vec<_>>(), vec![0.25, -3.0]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(3);
        let params = CnnParams {
            conv1_filters: 3,
            conv2_filters: 2,
            dense: 5,
            ..CnnParams::default()
        };
        let mut net = CnnNet::new(8, 3, &params, &mut rng).unwrap();
        // Nonzero biases keep ReLU kinks away from the sampled points.
        net.params_mut().into_iter().for_each(|p| p.iter_mut().for_each(|v| *v += 0.01));
        let x = DMatrix::from_fn(2, 64, |_, _| rng.uniform(-1.0, 1.0));
        let y = DMatrix::from_fn(2, 3, |_, _| rng.uniform(-1.0, 1.0));
        let (_, analytic) = net.loss_and_gradient(&x, &y, None);
        let numeric = numerical_gradient(&mut net, &x, &y, 1e-5);
        for (t, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(relative_error(a, n) < 1e-4, "tensor {t}: {}", relative_error(a, n));
        }
    }

    #[test]
    fn pooling_picks_first_maximum() {
        let input = [1.0, 3.0, 3.0, 0.0];
        let (out, arg) = maxpool2(&input, 1, 2, 2);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn fit_is_deterministic_and_reduces_loss() {
        let mut rng = SplitMix64::new(4);
        let x = DMatrix::from_fn(12, 64, |_, _| rng.uniform(0.0, 1.0));
        let y = DMatrix::from_fn(12, 2, |i, _| 30.0 + 20.0 * x[(i, 27)]);
        let params = CnnParams {
            conv1_filters: 4,
            conv2_filters: 2,
            dense: 8,
            epochs: 30,
            batch_size: 4,
            conv_dropout: 0.0,
            dense_dropout: 0.0,
            ..CnnParams::default()
        };
        let gx = FeatureMatrix::new(x, Provenance::Pca);
        let gy = TargetMatrix(y);
        let a = cnn_fit(&gx, &gy, &params, 9).unwrap();
        let b = cnn_fit(&gx, &gy, &params, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.history.last().unwrap() < &a.history[0]);
        assert_eq!(cnn_predict(&a, &gx).unwrap().0.shape(), (12, 2));
    }

    #[test]
    fn rejects_non_square_input() {
        let x = FeatureMatrix::new(DMatrix::zeros(2, 10), Provenance::Pca);
        let y = TargetMatrix(DMatrix::zeros(2, 1));
        assert!(cnn_fit(&x, &y, &CnnParams::default(), 0).is_err());
    }
}
