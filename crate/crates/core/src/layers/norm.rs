use crate::error::{BnnError, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running estimate in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Values averaged per channel.
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    /// Folds this batch into running estimates with the given momentum.
    /// The running variance uses the unbiased batch estimate.
    pub fn update_running(&self, mean: &mut [T], var: &mut [T], momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        let m = self.count as f64;
        let unbias = T::from_f64(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
        for c in 0..self.mean.len() {
            mean[c] = keep * mean[c] + take * self.mean[c];
            var[c] = keep * var[c] + take * self.var[c] * unbias;
        }
    }
}

pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

fn layout<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(BnnError::shape(format!(
            "batch norm needs rank ≥ 2, got {:?}",
            x.shape()
        )));
    }
    let c = x.dim(1);
    if gamma.len() != c || beta.len() != c {
        return Err(BnnError::shape(format!(
            "batch norm over {c} channels got {} scales and {} shifts",
            gamma.len(),
            beta.len()
        )));
    }
    Ok((x.dim(0), c, x.shape()[2..].iter().product()))
}

/// Normalizes with the statistics of the batch itself.
pub fn batchnorm_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats<T>)> {
    let (n, c, s) = layout(x, gamma, beta)?;
    let m = n * s;
    if m == 0 {
        return Err(BnnError::invalid("batch norm over an empty batch"));
    }
    let inv_m = T::one() / T::from_f64(m as f64);
    let eps = T::from_f64(BN_EPS);
    let xv = x.values();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for img in 0..n {
            acc = acc
                + xv[(img * c + ch) * s..(img * c + ch + 1) * s]
                    .iter()
                    .copied()
                    .sum();
        }
        mean[ch] = acc * inv_m;
        let mut sq = T::zero();
        for img in 0..n {
            for &v in &xv[(img * c + ch) * s..(img * c + ch + 1) * s] {
                let d = v - mean[ch];
                sq = sq + d * d;
            }
        }
        var[ch] = sq * inv_m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xv.len()];
    let mut y = vec![T::zero(); xv.len()];
    for img in 0..n {
        for ch in 0..c {
            for i in (img * c + ch) * s..(img * c + ch + 1) * s {
                xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchNormCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
        },
        BatchStats {
            mean,
            var,
            count: m,
        },
    ))
}

/// Normalizes with fixed (running) statistics.
pub fn batchnorm_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> Result<Tensor<T>> {
    let (n, c, s) = layout(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(BnnError::shape(
            "running statistics do not match channel count",
        ));
    }
    let eps = T::from_f64(BN_EPS);
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma[ch] / (var[ch] + eps).sqrt())
        .collect();
    let mut y = x.values().to_vec();
    for img in 0..n {
        for ch in 0..c {
            for v in &mut y[(img * c + ch) * s..(img * c + ch + 1) * s] {
                *v = (*v - mean[ch]) * scale[ch] + beta[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode forward.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    cache.xhat.expect_same_shape(grad_y)?;
    let (n, c, s) = layout(grad_y, gamma, gamma)?;
    let m = T::from_f64((n * s) as f64);
    let gy = grad_y.values();
    let xh = cache.xhat.values();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            for i in (img * c + ch) * s..(img * c + ch + 1) * s {
                dbeta[ch] = dbeta[ch] + gy[i];
                dgamma[ch] = dgamma[ch] + gy[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gy.len()];
    for img in 0..n {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            for i in (img * c + ch) * s..(img * c + ch + 1) * s {
                dx[i] = k * (m * gy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok((Tensor::new(grad_y.shape().to_vec(), dx)?, dgamma, dbeta))
}
