//! Parameterized layers: thin wrappers tying ops to named parameters.
//!
//! A layer owns its hyperparameters and the paths of its parameters inside a
//! [`ParamStore`]; it holds no activations. Networks keep the forward
//! activations themselves and hand them back to `backward`, which accumulates
//! parameter gradients into a [`GradStore`] and returns the input gradient.

use rand::Rng;

use crate::error::Result;
use crate::nn::ops;
use crate::nn::params::{he_conv_init, he_linear_init, uniform_init, GradStore, ParamStore};
use crate::nn::tensor::TensorND;

/// 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: String,
    pub bias: String,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub kernel: (usize, usize),
}

impl Conv2dLayer {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let weight = format!("{path}.w");
        let bias = format!("{path}.b");
        ps.register(&weight, he_conv_init(&[out_ch, in_ch, kernel.0, kernel.1], rng));
        ps.register(&bias, TensorND::zeros(&[out_ch]));
        Conv2dLayer {
            weight,
            bias,
            stride,
            pad,
            kernel,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &TensorND) -> Result<TensorND> {
        let mut y = ops::conv2d_general(x, ps.value(&self.weight), self.stride, self.pad)?;
        let (bs, c) = (y.shape()[0], y.shape()[1]);
        let spatial = y.shape()[2] * y.shape()[3];
        let bd = ps.value(&self.bias).data().to_vec();
        let yd = y.data_mut();
        for b in 0..bs {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for v in &mut yd[base..base + spatial] {
                    *v += bd[ch];
                }
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut GradStore,
        x: &TensorND,
        gout: &TensorND,
    ) -> Result<TensorND> {
        let w = ps.value(&self.weight);
        let gw = ops::conv2d_grad_kernel(x, gout, self.stride, self.pad, self.kernel)?;
        let gb_bc = ops::sum_spatial(gout)?;
        // Reduce the per-batch bias gradient over the batch axis.
        let (bs, c) = (gb_bc.shape()[0], gb_bc.shape()[1]);
        let mut gb = TensorND::zeros(&[c]);
        for b in 0..bs {
            for ch in 0..c {
                gb.data_mut()[ch] += gb_bc.data()[b * c + ch];
            }
        }
        let gin = ops::conv2d_grad_input(
            gout,
            w,
            self.stride,
            self.pad,
            (x.shape()[2], x.shape()[3]),
        )?;
        grads.accumulate(&self.weight, gw);
        grads.accumulate(&self.bias, gb);
        Ok(gin)
    }
}

/// Transposed 2-D convolution with bias, the adjoint of [`Conv2dLayer`].
#[derive(Debug, Clone)]
pub struct TConv2dLayer {
    pub weight: String,
    pub bias: String,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub kernel: (usize, usize),
}

impl TConv2dLayer {
    /// Kernels are stored as `[in_ch, out_ch, kh, kw]`, i.e. in the layout of
    /// the forward convolution this layer is adjoint to.
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let weight = format!("{path}.w");
        let bias = format!("{path}.b");
        ps.register(&weight, he_conv_init(&[in_ch, out_ch, kernel.0, kernel.1], rng));
        ps.register(&bias, TensorND::zeros(&[out_ch]));
        TConv2dLayer {
            weight,
            bias,
            stride,
            pad,
            kernel,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &TensorND) -> Result<TensorND> {
        let mut y = ops::transposed_conv2d_general(x, ps.value(&self.weight), self.stride, self.pad)?;
        let (bs, c) = (y.shape()[0], y.shape()[1]);
        let spatial = y.shape()[2] * y.shape()[3];
        let bd = ps.value(&self.bias).data().to_vec();
        let yd = y.data_mut();
        for b in 0..bs {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for v in &mut yd[base..base + spatial] {
                    *v += bd[ch];
                }
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut GradStore,
        x: &TensorND,
        gout: &TensorND,
    ) -> Result<TensorND> {
        let w = ps.value(&self.weight);
        let gw = ops::transposed_conv2d_grad_kernel(x, gout, self.stride, self.pad, self.kernel)?;
        let gb_bc = ops::sum_spatial(gout)?;
        let (bs, c) = (gb_bc.shape()[0], gb_bc.shape()[1]);
        let mut gb = TensorND::zeros(&[c]);
        for b in 0..bs {
            for ch in 0..c {
                gb.data_mut()[ch] += gb_bc.data()[b * c + ch];
            }
        }
        let gin = ops::transposed_conv2d_grad_input(gout, w, self.stride, self.pad)?;
        grads.accumulate(&self.weight, gw);
        grads.accumulate(&self.bias, gb);
        Ok(gin)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: String,
    pub bias: String,
}

impl LinearLayer {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{path}.w");
        let bias = format!("{path}.b");
        ps.register(&weight, he_linear_init(out_dim, in_dim, rng));
        ps.register(&bias, TensorND::zeros(&[out_dim]));
        LinearLayer { weight, bias }
    }

    pub fn forward(&self, ps: &ParamStore, x: &TensorND) -> Result<TensorND> {
        ops::linear(x, ps.value(&self.weight), ps.value(&self.bias))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut GradStore,
        x: &TensorND,
        gout: &TensorND,
    ) -> Result<TensorND> {
        let (gx, gw, gb) = ops::linear_backward(x, ps.value(&self.weight), gout)?;
        grads.accumulate(&self.weight, gw);
        grads.accumulate(&self.bias, gb);
        Ok(gx)
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNormLayer {
    /// Picks the largest group count <= 8 that divides `channels`.
    pub fn group_count(channels: usize) -> usize {
        let mut g = 8.min(channels);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }

    pub fn init(ps: &mut ParamStore, path: &str, channels: usize) -> Self {
        let gamma = format!("{path}.gamma");
        let beta = format!("{path}.beta");
        ps.register(&gamma, TensorND::filled(&[channels], 1.0));
        ps.register(&beta, TensorND::zeros(&[channels]));
        GroupNormLayer {
            gamma,
            beta,
            groups: Self::group_count(channels),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &TensorND) -> Result<TensorND> {
        ops::group_norm(x, ps.value(&self.gamma), ps.value(&self.beta), self.groups)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut GradStore,
        x: &TensorND,
        gout: &TensorND,
    ) -> Result<TensorND> {
        let (gx, ggamma, gbeta) =
            ops::group_norm_backward(x, ps.value(&self.gamma), self.groups, gout)?;
        grads.accumulate(&self.gamma, ggamma);
        grads.accumulate(&self.beta, gbeta);
        Ok(gx)
    }
}

/// Learned lookup table for integer ids (class labels).
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub table: String,
    pub count: usize,
    pub dim: usize,
}

impl EmbeddingLayer {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        path: &str,
        count: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = format!("{path}.table");
        ps.register(&table, uniform_init(&[count, dim], 0.05, rng));
        EmbeddingLayer { table, count, dim }
    }

    pub fn forward(&self, ps: &ParamStore, ids: &[usize]) -> Result<TensorND> {
        ops::embedding(ps.value(&self.table), ids)
    }

    pub fn backward(&self, grads: &mut GradStore, ids: &[usize], gout: &TensorND) {
        let g = ops::embedding_backward(&[self.count, self.dim], ids, gout);
        grads.accumulate(&self.table, g);
    }
}
