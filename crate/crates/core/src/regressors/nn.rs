//! Pieces shared by the MLP and the CNN: initialization, dropout,
//! optimizers and the mini-batch training loop.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    RmsProp { lr: f64, rho: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd {
            lr: 0.01,
            momentum: 0.9,
        }
    }

    pub fn rmsprop() -> Self {
        Optimizer::RmsProp {
            lr: 0.001,
            rho: 0.9,
            eps: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            Optimizer::RmsProp { lr, rho, eps } => lr > 0.0 && (0.0..1.0).contains(&rho) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Per-tensor optimizer memory (velocity or squared-gradient average).
pub(crate) struct OptState {
    opt: Optimizer,
    slots: Vec<Vec<f64>>,
}

impl OptState {
    pub(crate) fn new(opt: Optimizer, sizes: &[usize]) -> Self {
        Self {
            opt,
            slots: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub(crate) fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.slots) {
            match self.opt {
                Optimizer::Sgd { lr, momentum } => {
                    for ((p, g), v) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *v = momentum * *v - lr * g;
                        *p += *v;
                    }
                }
                Optimizer::RmsProp { lr, rho, eps } => {
                    for ((p, g), a) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *a = rho * *a + (1.0 - rho) * g * g;
                        *p -= lr * g / (a.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Glorot-uniform draw with `s = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rng: &mut SplitMix64, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.uniform(-s, s)).collect()
}

/// Inverted dropout mask: kept units are scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask(rng: &mut SplitMix64, rate: f64, len: usize) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect()
}

/// A network trainable by mini-batch backpropagation on mean squared error.
pub trait Network {
    /// Parameter tensors in a fixed order, flattened.
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    /// Mean squared error over every entry of `y` and its gradient with
    /// respect to each parameter tensor. Dropout is active only when an RNG
    /// is supplied.
    fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        dropout: Option<&mut SplitMix64>,
    ) -> (f64, Vec<Vec<f64>>);
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Disables dropout when false regardless of the network's rates.
    pub dropout: bool,
    pub shuffle: bool,
}

/// Runs the epochs and returns each epoch's loss, the sample-weighted mean
/// of its batch losses measured before every update.
pub(crate) fn train<N: Network>(
    net: &mut N,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    settings: &TrainSettings,
    rng: &mut SplitMix64,
) -> Result<Vec<f64>> {
    if settings.batch_size == 0 || settings.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    settings.optimizer.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::invalid("cannot train on zero rows"));
    }
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut state = OptState::new(settings.optimizer, &sizes);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        if settings.shuffle {
            rng.shuffle(&mut order);
        }
        let mut total = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let bx = x.select_rows(batch);
            let by = y.select_rows(batch);
            let (loss, grads) = if settings.dropout {
                net.loss_and_gradient(&bx, &by, Some(rng))
            } else {
                net.loss_and_gradient(&bx, &by, None)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
            state.step(net.params_mut(), &grads);
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Central finite differences of the dropout-free loss for every parameter.
pub fn numerical_gradient<N: Network>(net: &mut N, x: &DMatrix<f64>, y: &DMatrix<f64>, eps: f64) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (t, &len) in sizes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = net.params()[t][i];
            net.params_mut()[t][i] = orig + eps;
            let up = net.loss_and_gradient(x, y, None).0;
            net.params_mut()[t][i] = orig - eps;
            let down = net.loss_and_gradient(x, y, None).0;
            net.params_mut()[t][i] = orig;
            *gi = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / (||a|| + ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let den = norm(a) + norm(b);
    if den == 0.0 {
        0.0
    } else {
        norm(&diff) / den
    }
}

pub(crate) fn mse_grad(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let diff = pred - y;
    let count = diff.len() as f64;
    (diff.norm_squared() / count, diff * (2.0 / count))
}
