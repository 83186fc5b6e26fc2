//! Batch normalization: affine parameters, running statistics and the raw
//! forward/backward kernels used by the tape.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Train uses batch statistics and produces running-stat updates; eval uses
/// the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which elements share one set of statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayout {
    /// Every non-batch element is its own lane; statistics over the batch axis only.
    PerFeature,
    /// Axis 1 indexes lanes; statistics over the batch and all trailing axes.
    PerChannel,
}

impl BnLayout {
    /// `(n, lanes, inner)` view of a batch tensor shape.
    pub(crate) fn split(self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() < 2 {
            return shape_err(format!("batch norm needs rank >= 2, got {shape:?}"));
        }
        let n = shape[0];
        Ok(match self {
            BnLayout::PerFeature => (n, shape[1..].iter().product(), 1),
            BnLayout::PerChannel => (n, shape[1], shape[2..].iter().product()),
        })
    }
}

/// Per-lane batch mean and unbiased variance observed in one train step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Number of train steps absorbed into the running statistics.
    pub tracked: u64,
    pub layout: BnLayout,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    /// Fresh state: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(lanes: usize, layout: BnLayout) -> Self {
        Self {
            gamma: Tensor::ones(&[lanes]),
            beta: Tensor::zeros(&[lanes]),
            running_mean: Tensor::zeros(&[lanes]),
            running_var: Tensor::ones(&[lanes]),
            tracked: 0,
            layout,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn lanes(&self) -> usize {
        self.gamma.len()
    }

    pub fn absorb(&mut self, m: &BatchMoments) {
        let k = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&m.mean) {
            *r = (1.0 - k) * *r + k * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&m.var) {
            *r = (1.0 - k) * *r + k * b;
        }
        self.tracked += 1;
    }

    /// Tape-free forward pass.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BatchMoments>)> {
        let out = bn_forward(
            x,
            self.gamma.data(),
            self.beta.data(),
            self,
            mode,
        )?;
        Ok((Tensor::new(x.shape().to_vec(), out.y)?, out.moments))
    }
}

pub(crate) struct BnForward {
    pub y: Vec<f64>,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub moments: Option<BatchMoments>,
}

pub(crate) fn bn_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNorm,
    mode: Mode,
) -> Result<BnForward> {
    let (n, lanes, inner) = state.layout.split(x.shape())?;
    if lanes != state.lanes() || gamma.len() != lanes || beta.len() != lanes {
        return shape_err(format!(
            "batch norm has {} lanes, input {:?} has {lanes}",
            state.lanes(),
            x.shape()
        ));
    }
    let xs = x.data();
    let count = (n * inner) as f64;
    let (mean, var, moments) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::BatchSize(format!(
                    "train-mode batch norm needs N >= 2, got {n}"
                )));
            }
            let mut mean = vec![0.0; lanes];
            let mut var = vec![0.0; lanes];
            for s in 0..n {
                for (c, m) in mean.iter_mut().enumerate() {
                    let base = (s * lanes + c) * inner;
                    *m += xs[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for s in 0..n {
                for c in 0..lanes {
                    let base = (s * lanes + c) * inner;
                    let mu = mean[c];
                    var[c] += xs[base..base + inner]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
            let moments = BatchMoments {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(moments))
        }
        Mode::Eval => {
            if state.tracked == 0 {
                log::warn!("batch norm evaluated before any running-stat update; using mean 0, var 1");
            }
            (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
                None,
            )
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut y = Vec::with_capacity(xs.len());
    for s in 0..n {
        for c in 0..lanes {
            let base = (s * lanes + c) * inner;
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            y.extend(xs[base..base + inner].iter().map(|v| v * scale + shift));
        }
    }
    Ok(BnForward {
        y,
        mean,
        inv_std,
        moments,
    })
}

/// Returns `(dx, dgamma, dbeta)`. The normalized input is recomputed from
/// `x`, `mean` and `inv_std`.
pub(crate) fn bn_backward(
    dy: &[f64],
    x: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dims: (usize, usize, usize),
    mode: Mode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, lanes, inner) = dims;
    let mut dgamma = vec![0.0; lanes];
    let mut dbeta = vec![0.0; lanes];
    for s in 0..n {
        for c in 0..lanes {
            let base = (s * lanes + c) * inner;
            let (mu, is) = (mean[c], inv_std[c]);
            let (mut dg, mut db) = (0.0, 0.0);
            for (g, v) in dy[base..base + inner].iter().zip(&x[base..base + inner]) {
                dg += g * (v - mu) * is;
                db += g;
            }
            dgamma[c] += dg;
            dbeta[c] += db;
        }
    }
    let mut dx = Vec::with_capacity(dy.len());
    let count = (n * inner) as f64;
    for s in 0..n {
        for c in 0..lanes {
            let base = (s * lanes + c) * inner;
            let g = gamma[c] * inv_std[c];
            let dys = &dy[base..base + inner];
            match mode {
                Mode::Eval => dx.extend(dys.iter().map(|d| g * d)),
                Mode::Train => {
                    let (mu, is) = (mean[c], inv_std[c]);
                    let (mb, mg) = (dbeta[c] / count, dgamma[c] / count);
                    dx.extend(
                        dys.iter()
                            .zip(&x[base..base + inner])
                            .map(|(d, v)| g * (d - mb - (v - mu) * is * mg)),
                    );
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
