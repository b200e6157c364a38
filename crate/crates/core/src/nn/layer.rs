//! Convolution layer with optional ReLU and batch normalization, applied in
//! that order: `bn(relu(conv(x) + bias))`.

use rand::Rng;

use super::activation::{relu, relu_backward};
use super::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache, Mode};
use super::conv::{conv2d_backward, conv2d_forward};
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::rng::uniform;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `(out_channels, in_channels, f, f)`
    pub kernels: Tensor4<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
}

impl<T: Scalar> ConvLayer<T> {
    /// All-zero kernels and biases; BN (when enabled) starts as the identity.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        relu: bool,
        bn: bool,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel side must be odd, got {kernel}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        Ok(Self {
            kernels: Tensor4::zeros([out_channels, in_channels, kernel, kernel]),
            bias: vec![T::zero(); out_channels],
            bn: bn.then(|| BatchNorm::new(out_channels)),
            relu,
        })
    }

    /// Glorot-uniform kernels, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let [o, i, f, _] = self.kernels.shape();
        let bound = T::lit((6.0 / ((i * f * f + o * f * f) as f64)).sqrt());
        for w in self.kernels.data_mut() {
            *w = uniform(rng, -bound, bound);
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn kernel_count(&self) -> usize {
        self.kernels.len()
    }

    pub fn forward(&self, input: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, LayerCache<T>)> {
        let z = conv2d_forward(input, &self.kernels, &self.bias)?;
        let (a, pre_activation) = if self.relu {
            (relu(&z), Some(z))
        } else {
            (z, None)
        };
        let (out, bn_cache) = match &self.bn {
            Some(bn) => {
                let (y, c) = batchnorm_forward(&a, bn, mode)?;
                (y, Some(c))
            }
            None => (a, None),
        };
        Ok((
            out,
            LayerCache {
                input: input.clone(),
                pre_activation,
                bn: bn_cache,
            },
        ))
    }

    /// Inference pass that keeps no cache.
    pub fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut x = conv2d_forward(input, &self.kernels, &self.bias)?;
        if self.relu {
            for v in x.data_mut() {
                *v = v.max(T::zero());
            }
        }
        if let Some(bn) = &self.bn {
            x = batchnorm_forward(&x, bn, Mode::Infer)?.0;
        }
        Ok(x)
    }

    pub fn backward(
        &self,
        grad_out: &Tensor4<T>,
        cache: &LayerCache<T>,
        need_input_grad: bool,
    ) -> Result<LayerGrads<T>> {
        let (mut g, gamma, beta) = match (&self.bn, &cache.bn) {
            (Some(bn), Some(c)) => {
                let bg = batchnorm_backward(grad_out, c, bn)?;
                (bg.input, Some(bg.gamma), Some(bg.beta))
            }
            (None, None) => (grad_out.clone(), None, None),
            _ => {
                return Err(Error::InvalidArgument(
                    "cache does not match layer BN configuration".into(),
                ))
            }
        };
        if self.relu {
            let z = cache
                .pre_activation
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("cache lacks the pre-activation".into()))?;
            g = relu_backward(&g, z)?;
        }
        let cg = conv2d_backward(&g, &cache.input, &self.kernels, need_input_grad)?;
        Ok(LayerGrads {
            input: cg.input,
            kernels: cg.kernels,
            bias: cg.bias,
            gamma,
            beta,
        })
    }

    /// Trainable tensors in the fixed order kernels, bias, gamma, beta.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = vec![self.kernels.data_mut(), &mut self.bias];
        if let Some(bn) = self.bn.as_mut() {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.kernels.len(), self.bias.len()];
        if let Some(bn) = &self.bn {
            v.push(bn.gamma.len());
            v.push(bn.beta.len());
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            kernels: self.kernels.cast(),
            bias: self.bias.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            bn: self.bn.as_ref().map(|b| b.cast()),
            relu: self.relu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub input: Tensor4<T>,
    pub pre_activation: Option<Tensor4<T>>,
    pub bn: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub kernels: Tensor4<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

impl<T: Scalar> LayerGrads<T> {
    /// Same order as [`ConvLayer::params_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![self.kernels.data(), &self.bias];
        if let (Some(g), Some(b)) = (&self.gamma, &self.beta) {
            v.push(g);
            v.push(b);
        }
        v
    }
}

/// Runs `layers` in sequence, keeping the per-layer caches.
pub fn stack_forward<T: Scalar>(
    layers: &[ConvLayer<T>],
    input: &Tensor4<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for layer in layers {
        let (y, c) = layer.forward(&x, mode)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

/// Backpropagates through a stack; returns the input gradient when asked for.
pub fn stack_backward<T: Scalar>(
    layers: &[ConvLayer<T>],
    caches: &[LayerCache<T>],
    grad_out: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor4<T>>, Vec<LayerGrads<T>>)> {
    if caches.len() != layers.len() {
        return Err(Error::shape(layers.len(), caches.len()));
    }
    let mut grads: Vec<LayerGrads<T>> = Vec::with_capacity(layers.len());
    let mut g = grad_out.clone();
    let mut input_grad = if layers.is_empty() && need_input_grad {
        Some(g.clone())
    } else {
        None
    };
    for (idx, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let want_input = idx > 0 || need_input_grad;
        let mut lg = layer.backward(&g, cache, want_input)?;
        if let Some(gi) = lg.input.take() {
            if idx == 0 {
                input_grad = Some(gi);
            } else {
                g = gi;
            }
        }
        grads.push(lg);
    }
    grads.reverse();
    Ok((input_grad, grads))
}
