//! Batch normalization over the last (channel) axis.

use super::conv::narrow;
use super::{same_shape, Element, Result, Tensor, TensorError};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic in the moving average.
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNormParams<T> {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            epsilon: DEFAULT_BN_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, input: &Tensor<T>) -> Result<usize> {
        if !(self.epsilon > 0.0) {
            return Err(TensorError::Config(format!(
                "batchnorm epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(TensorError::Config(format!(
                "batchnorm momentum must lie in (0, 1), got {}",
                self.momentum
            )));
        }
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(TensorError::dim(format!("{name} length"), c, t.len()));
            }
        }
        let last = *input.shape().last().unwrap_or(&0);
        if last != c {
            return Err(TensorError::dim("channels", c, last));
        }
        Ok(c)
    }
}

/// Values saved by a training-mode forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T = f32> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Inference-mode normalization with the running statistics.
pub fn batchnorm<T: Element>(input: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let c = p.validate(input)?;
    let scale: Vec<f64> = (0..c)
        .map(|i| {
            p.gamma.data()[i].wide() / (p.running_var.data()[i].wide() + p.epsilon).sqrt()
        })
        .collect();
    let out = input
        .data()
        .chunks_exact(c)
        .flat_map(|row| {
            row.iter().enumerate().map(|(i, &x)| {
                let centered = x.wide() - p.running_mean.data()[i].wide();
                T::of(scale[i] * centered + p.beta.data()[i].wide())
            })
        })
        .collect();
    Tensor::new(input.shape(), out)
}

/// Training-mode normalization with batch statistics (biased variance).
/// The running statistics are updated as
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn batchnorm_train<T: Element>(
    input: &Tensor<T>,
    p: &mut BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = p.validate(input)?;
    let rows = input.len() / c;
    let mut mean = vec![0f64; c];
    for row in input.data().chunks_exact(c) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x.wide();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0f64; c];
    for row in input.data().chunks_exact(c) {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x.wide() - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();

    let mut normalized = Vec::with_capacity(input.len());
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(c) {
        for (i, &x) in row.iter().enumerate() {
            let xh = (x.wide() - mean[i]) * inv_std[i];
            normalized.push(T::of(xh));
            out.push(T::of(
                p.gamma.data()[i].wide() * xh + p.beta.data()[i].wide(),
            ));
        }
    }

    let mom = p.momentum;
    for i in 0..c {
        let rm = &mut p.running_mean.data_mut()[i];
        *rm = T::of(mom * rm.wide() + (1.0 - mom) * mean[i]);
        let rv = &mut p.running_var.data_mut()[i];
        *rv = T::of(mom * rv.wide() + (1.0 - mom) * var[i]);
    }

    Ok((
        Tensor::new(input.shape(), out)?,
        BatchNormCache {
            normalized: Tensor::new(input.shape(), normalized)?,
            inv_std,
        },
    ))
}

/// Gradient of a training-mode batch normalization.
pub fn batchnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    p: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
) -> Result<BatchNormGrads<T>> {
    same_shape(cache.normalized.shape(), grad_out.shape())?;
    let c = p.channels();
    if cache.inv_std.len() != c {
        return Err(TensorError::State(
            "batchnorm cache does not match parameters".into(),
        ));
    }
    let rows = grad_out.len() / c;
    let mut sum_dy = vec![0f64; c];
    let mut sum_dy_xh = vec![0f64; c];
    for (g, xh) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for i in 0..c {
            let dy = g[i].wide();
            sum_dy[i] += dy;
            sum_dy_xh[i] += dy * xh[i].wide();
        }
    }
    let n = rows as f64;
    let mut gx = Vec::with_capacity(grad_out.len());
    for (g, xh) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for i in 0..c {
            let gamma = p.gamma.data()[i].wide();
            let dxh = g[i].wide() * n - sum_dy[i] - xh[i].wide() * sum_dy_xh[i];
            gx.push(T::of(gamma * cache.inv_std[i] * dxh / n));
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape(), gx)?,
        gamma: Tensor::new(&[c], narrow(sum_dy_xh))?,
        beta: Tensor::new(&[c], narrow(sum_dy))?,
    })
}
