//! Per-channel batch normalization over `(batch, row, col)`.

use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(DEFAULT_EPS),
            momentum: T::lit(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds the batch statistics of a train-mode pass into the running averages.
    /// The running variance uses the unbiased batch estimate.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let Some(count) = cache.count else { return };
        let unbias = if count > 1 {
            T::lit(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        let keep = self.momentum;
        let take = T::one() - keep;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + take * cache.mean[c];
            self.running_var[c] = keep * self.running_var[c] + take * cache.var[c] * unbias;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect();
        BatchNorm {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            eps: U::lit(self.eps.to_f64_lossy()),
            momentum: U::lit(self.momentum.to_f64_lossy()),
        }
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel in train mode; `None` in infer mode.
    pub count: Option<usize>,
}

pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor4<T>,
    bn: &BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let [batch, channels, _, _] = input.shape();
    if channels != bn.channels() {
        return Err(Error::shape(
            format!("{} channels", bn.channels()),
            channels,
        ));
    }
    if mode == Mode::Train && batch < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch normalization in train mode needs a batch of at least 2, got {batch}"
        )));
    }
    let area = input.area();
    let x = input.data();
    let (mean, var, count) = match mode {
        Mode::Train => {
            let count = batch * area;
            let inv_n = T::one() / T::from_usize(count).expect("count");
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            for c in 0..channels {
                let mut s = T::zero();
                for n in 0..batch {
                    let off = (n * channels + c) * area;
                    s = s + x[off..off + area].iter().copied().sum::<T>();
                }
                let mu = s * inv_n;
                let mut sq = T::zero();
                for n in 0..batch {
                    let off = (n * channels + c) * area;
                    sq = sq
                        + x[off..off + area]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<T>();
                }
                mean[c] = mu;
                var[c] = sq * inv_n;
            }
            (mean, var, Some(count))
        }
        Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone(), None),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + bn.eps).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = Tensor4::zeros(input.shape());
    let y = out.data_mut();
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * area;
            let (mu, is, g, b) = (mean[c], inv_std[c], bn.gamma[c], bn.beta[c]);
            for p in off..off + area {
                let h = (x[p] - mu) * is;
                xhat[p] = h;
                y[p] = g * h + b;
            }
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    cache: &BnCache<T>,
    bn: &BatchNorm<T>,
) -> Result<BnGrads<T>> {
    let [batch, channels, _, _] = grad_out.shape();
    if channels != bn.channels() || grad_out.len() != cache.xhat.len() {
        return Err(Error::shape(
            format!("{} channels, {} values", bn.channels(), cache.xhat.len()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let area = grad_out.area();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * area;
            for p in off..off + area {
                dgamma[c] = dgamma[c] + dy[p] * cache.xhat[p];
                dbeta[c] = dbeta[c] + dy[p];
            }
        }
    }
    let mut dx = Tensor4::zeros(grad_out.shape());
    let out = dx.data_mut();
    match cache.count {
        Some(count) => {
            // dx = g*is/N * (N dy - sum dy - xhat * sum(dy xhat))
            let nf = T::from_usize(count).expect("count");
            for c in 0..channels {
                let scale = bn.gamma[c] * cache.inv_std[c] / nf;
                for n in 0..batch {
                    let off = (n * channels + c) * area;
                    for p in off..off + area {
                        out[p] = scale * (nf * dy[p] - dbeta[c] - cache.xhat[p] * dgamma[c]);
                    }
                }
            }
        }
        None => {
            for c in 0..channels {
                let scale = bn.gamma[c] * cache.inv_std[c];
                for n in 0..batch {
                    let off = (n * channels + c) * area;
                    for p in off..off + area {
                        out[p] = scale * dy[p];
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}
