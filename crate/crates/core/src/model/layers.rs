//! Affine and batch-normalization layers with explicit caches.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x W^T + b`, with `W` stored as out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `dW`, `db` and `dx`.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let gw = grad_out.t().dot(&x);
        let gb = grad_out.sum_axis(Axis(0));
        let gx = grad_out.dot(&self.weight);
        (gw, gb, gx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    /// Train mode normalizes with biased batch statistics and folds them into
    /// the running averages; eval mode uses the running averages.
    pub fn forward(&mut self, x: ArrayView2<f64>, mode: Mode) -> (Array2<f64>, BatchNormCache) {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_axis(Axis(0)).unwrap();
                let var = x.var_axis(Axis(0), 0.0);
                self.running_mean =
                    &self.running_mean * self.momentum + &mean * (1.0 - self.momentum);
                self.running_var = &self.running_var * self.momentum + &var * (1.0 - self.momentum);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        )
    }

    /// Returns `dgamma`, `dbeta`, `dx`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad_out: ArrayView2<f64>,
    ) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
        let dgamma = (&grad_out * &cache.xhat).sum_axis(Axis(0));
        let dbeta = grad_out.sum_axis(Axis(0));
        let dxhat = &grad_out * &self.gamma;
        let dx = if cache.batch_stats {
            let b = grad_out.nrows() as f64;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let centered = &dxhat * b - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
            centered * &(&cache.inv_std / b)
        } else {
            dxhat * &cache.inv_std
        };
        (dgamma, dbeta, dx)
    }
}
