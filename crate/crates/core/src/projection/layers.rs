//! Layer primitives with hand-written backward passes. All tensors are
//! `batch x channels`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
            b: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &x.t().dot(&dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

/// Per-instance normalization over channel groups.
///
/// Channels are split into consecutive groups of `ceil(C / groups)`; the last
/// group may be smaller. Each row is normalized independently of the rest of
/// the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Array2<f64>,
    /// `batch x groups`.
    inv_std: Array2<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        Self {
            groups: groups.clamp(1, channels.max(1)),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: NORM_EPS,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self.groups,
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            eps: self.eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Channel ranges of each group.
    pub fn group_ranges(&self) -> Vec<(usize, usize)> {
        let c = self.channels();
        let size = c.div_ceil(self.groups);
        (0..c).step_by(size).map(|lo| (lo, (lo + size).min(c))).collect()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, GroupNormCache) {
        let ranges = self.group_ranges();
        let (n, c) = x.dim();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let gamma = self.gamma.as_slice().expect("contiguous");
        let beta = self.beta.as_slice().expect("contiguous");
        let mut xhat = vec![0.0; n * c];
        let mut y = vec![0.0; n * c];
        let mut inv_std = Vec::with_capacity(n * ranges.len());
        for r in 0..n {
            let row = &xs[r * c..(r + 1) * c];
            for &(lo, hi) in &ranges {
                let seg = &row[lo..hi];
                let m = (hi - lo) as f64;
                let mean = seg.iter().sum::<f64>() / m;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std.push(is);
                for j in lo..hi {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    y[r * c + j] = h * gamma[j] + beta[j];
                }
            }
        }
        let shape = |v| Array2::from_shape_vec((n, c), v).expect("sized above");
        let inv_std = Array2::from_shape_vec((n, ranges.len()), inv_std).expect("sized above");
        (
            shape(y),
            GroupNormCache {
                xhat: shape(xhat),
                inv_std,
            },
        )
    }

    pub fn backward(&self, cache: &GroupNormCache, dy: ArrayView2<'_, f64>, grad: &mut GroupNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let (n, c) = dy.dim();
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let gamma = self.gamma.as_slice().expect("contiguous");
        let ranges = self.group_ranges();
        let mut dx = vec![0.0; n * c];
        let mut dxhat = vec![0.0; c];
        for r in 0..n {
            let base = r * c;
            for j in 0..c {
                dxhat[j] = dys[base + j] * gamma[j];
            }
            for (g, &(lo, hi)) in ranges.iter().enumerate() {
                let m = (hi - lo) as f64;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in lo..hi {
                    sum_d += dxhat[j];
                    sum_dx += dxhat[j] * xh[base + j];
                }
                let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
                let is = cache.inv_std[[r, g]];
                for j in lo..hi {
                    dx[base + j] = is * (dxhat[j] - mean_d - xh[base + j] * mean_dx);
                }
            }
        }
        Array2::from_shape_vec((n, c), dx).expect("sized above")
    }
}

/// Batch normalization with running statistics (`running = (1-m) running + m batch`,
/// unbiased batch variance for the running estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            running_mean: Array1::zeros(self.gamma.raw_dim()),
            running_var: Array1::zeros(self.gamma.raw_dim()),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    /// Train mode normalizes by batch statistics and updates the running ones.
    pub fn forward(&mut self, x: ArrayView2<'_, f64>, mode: Mode) -> Result<(Array2<f64>, BatchNormCache)> {
        let n = x.nrows();
        let (xhat, inv_std) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &x - &mean;
                let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n as f64;
                let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
                let m = self.momentum;
                let unbiased = &var * (n as f64 / (n - 1) as f64);
                Zip::from(&mut self.running_mean)
                    .and(&mean)
                    .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
                Zip::from(&mut self.running_var)
                    .and(&unbiased)
                    .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
                (centered * &inv_std, inv_std)
            }
            Mode::Eval => {
                let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
                ((&x - &self.running_mean) * &inv_std, inv_std)
            }
        };
        let y = &xhat * &self.gamma + &self.beta;
        Ok((y, BatchNormCache { xhat, inv_std, mode }))
    }

    /// Eval-mode forward without touching the running statistics.
    pub fn infer(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        (&x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: ArrayView2<'_, f64>, grad: &mut BatchNorm) -> Array2<f64> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        match cache.mode {
            Mode::Eval => dxhat * &cache.inv_std,
            Mode::Train => {
                let n = dy.nrows() as f64;
                let mean_d = dxhat.sum_axis(Axis(0)) / n;
                let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / n;
                (dxhat - &mean_d - &cache.xhat * &mean_dx) * &cache.inv_std
            }
        }
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its pre-activation.
pub fn relu_backward(pre: &Array2<f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}
