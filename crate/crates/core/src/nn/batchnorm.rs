//! Per-channel batch normalization.
//!
//! Training mode standardizes each channel over `(n, h, w)` using the batch
//! mean and the biased (population) variance, then applies `gamma * x_hat +
//! beta`. Inference mode runs the same formula with the running estimates in
//! place of batch statistics, so it is a fixed affine map per channel.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Exponential moving averages of the batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// `None` until the first training batch has been seen.
    pub running: Option<RunningStats>,
    pub epsilon: f64,
    /// Weight of the new batch in the running average.
    pub momentum: f64,
}

/// Saved state from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: Tensor4,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnTrainOutput {
    pub y: Tensor4,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub cache: BnCache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub input: Tensor4,
}

impl BnParams {
    /// `gamma = 1`, `beta = 0`, no running statistics yet.
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running: None,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one batch's statistics into the running averages:
    /// `new = (1 - momentum) * old + momentum * batch`. Before the first
    /// update the running estimate is taken as mean 0, variance 1.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let k = self.channels();
        let m = self.momentum;
        let running = self
            .running
            .get_or_insert_with(|| RunningStats { mean: vec![0.0; k], var: vec![1.0; k] });
        for c in 0..k {
            running.mean[c] = (1.0 - m) * running.mean[c] + m * batch_mean[c];
            running.var[c] = (1.0 - m) * running.var[c] + m * batch_var[c];
        }
    }

    /// Sets running statistics to mean 0, variance 1 if none exist yet.
    pub fn init_running(&mut self) {
        let k = self.channels();
        self.running.get_or_insert_with(|| RunningStats { mean: vec![0.0; k], var: vec![1.0; k] });
    }

    fn check_channels(&self, x: &Tensor4) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::ChannelMismatch { expected: self.channels(), got: x.shape().c });
        }
        Ok(())
    }
}

#[inline]
fn inv_std(var: f64, eps: f64) -> f64 {
    1.0 / (var + eps).sqrt()
}

/// Applies `gamma * (x - mean) * inv_std + beta` channel by channel.
fn affine(x: &Tensor4, p: &BnParams, mean: &[f64], inv: &[f64]) -> (Tensor4, Tensor4) {
    let s = x.shape();
    let plane = s.plane_len();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let xh = &mut x_hat.data_mut()[off..off + plane];
            for v in xh.iter_mut() {
                *v = (*v - mean[c]) * inv[c];
            }
            let (g, b) = (p.gamma[c], p.beta[c]);
            for (out, &h) in y.data_mut()[off..off + plane].iter_mut().zip(x_hat.data()[off..off + plane].iter()) {
                *out = g * h + b;
            }
        }
    }
    (y, x_hat)
}

/// Training-mode forward pass. Does not touch `p`; feed the returned batch
/// statistics to [`BnParams::update_running`] to advance the running averages.
pub fn bn_forward_train(x: &Tensor4, p: &BnParams) -> Result<BnTrainOutput> {
    p.check_channels(x)?;
    let s = x.shape();
    let count = s.n * s.h * s.w;
    if count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    let plane = s.plane_len();
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let values = (0..s.n).flat_map(|n| {
            let off = (n * s.c + c) * plane;
            x.data()[off..off + plane].iter().copied()
        });
        let (lo, hi) = values.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if lo == hi {
            // Constant channel: exact zero variance, so x_hat is exactly 0.
            mean[c] = lo;
            continue;
        }
        let mu = values.clone().sum::<f64>() / count as f64;
        mean[c] = mu;
        var[c] = values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
    }
    let inv: Vec<f64> = var.iter().map(|&v| inv_std(v, p.epsilon)).collect();
    let (y, x_hat) = affine(x, p, &mean, &inv);
    Ok(BnTrainOutput { y, batch_mean: mean, batch_var: var, cache: BnCache { x_hat, inv_std: inv } })
}

/// Inference-mode forward pass using the running statistics.
pub fn bn_forward_infer(x: &Tensor4, p: &BnParams) -> Result<Tensor4> {
    p.check_channels(x)?;
    let running = p.running.as_ref().ok_or(Error::UninitializedRunningStats)?;
    let inv: Vec<f64> = running.var.iter().map(|&v| inv_std(v, p.epsilon)).collect();
    Ok(affine(x, p, &running.mean, &inv).0)
}

/// Full batch-norm backward, including the dependence of the batch mean and
/// variance on every input.
pub fn bn_backward(cache: &BnCache, p: &BnParams, grad_out: &Tensor4) -> Result<BnGrads> {
    let s = grad_out.shape();
    if s != cache.x_hat.shape() {
        return Err(Error::ShapeMismatch { left: cache.x_hat.shape().dims(), right: s.dims() });
    }
    if s.c != p.channels() || cache.inv_std.len() != s.c {
        return Err(Error::ChannelMismatch { expected: p.channels(), got: s.c });
    }
    let plane = s.plane_len();
    let count = (s.n * plane) as f64;
    let mut g_gamma = vec![0.0; s.c];
    let mut g_beta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let go = &grad_out.data()[off..off + plane];
            let xh = &cache.x_hat.data()[off..off + plane];
            for (g, h) in go.iter().zip(xh) {
                g_beta[c] += g;
                g_gamma[c] += g * h;
            }
        }
    }
    // dx = gamma * inv_std / M * (M * dy - sum(dy) - x_hat * sum(dy * x_hat))
    let mut input = grad_out.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let scale = p.gamma[c] * cache.inv_std[c] / count;
            let xh = &cache.x_hat.data()[off..off + plane];
            for (v, h) in input.data_mut()[off..off + plane].iter_mut().zip(xh) {
                *v = scale * (count * *v - g_beta[c] - h * g_gamma[c]);
            }
        }
    }
    Ok(BnGrads { gamma: g_gamma, beta: g_beta, input })
}
