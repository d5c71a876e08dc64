//! Differentiable tensor operations with hand-written backward passes.
//!
//! Every op is a pure function over [`TensorND`]; gradients are exposed as
//! separate `*_grad_*` functions so networks can be assembled as static layer
//! graphs with explicit backward methods. Conventions:
//!
//! * feature maps are `[B, C, H, W]`,
//! * convolution kernels are `[C_out, C_in, kh, kw]`,
//! * linear weights are `[O, I]`, inputs `[B, I]`.
//!
//! Convolutions require `(H + 2*pad - k) % stride == 0` so that the
//! transposed convolution is the exact adjoint of the forward one.

use crate::error::{Error, Result};
use crate::nn::tensor::TensorND;

fn dims4(t: &TensorND, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(Error::Shape(format!("{what} must be rank 4, got {s:?}"))),
    }
}

fn dims2(t: &TensorND, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(Error::Shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::Shape(format!(
            "input {input} with pad {pad}, kernel {k} not divisible by stride {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Cross-correlation of `x [B,Ci,H,W]` with kernels `w [Co,Ci,kh,kw]`.
///
/// Output spatial side is `(H + 2*pad - k)/stride + 1` per axis.
pub fn conv2d_general(
    x: &TensorND,
    w: &TensorND,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorND> {
    let (bs, ci, h, wd) = dims4(x, "conv input")?;
    let (co, ci_w, kh, kw) = dims4(w, "conv kernels")?;
    if ci != ci_w {
        return Err(Error::Shape(format!(
            "conv input has {ci} channels, kernels expect {ci_w} (input {:?}, kernels {:?})",
            x.shape(),
            w.shape()
        )));
    }
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ho = conv_out_dim(h, kh, sh, ph)?;
    let wo = conv_out_dim(wd, kw, sw, pw)?;

    let mut out = TensorND::zeros(&[bs, co, ho, wo]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for b in 0..bs {
        for c_out in 0..co {
            for c_in in 0..ci {
                let wbase = ((c_out * ci + c_in) * kh) * kw;
                let xbase = (b * ci + c_in) * h * wd;
                let obase = ((b * co + c_out) * ho) * wo;
                for oy in 0..ho {
                    let iy0 = (oy * sh) as isize - ph as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xd[xbase + iy as usize * wd..xbase + (iy as usize + 1) * wd];
                        let wrow = &wdat[wbase + ky * kw..wbase + (ky + 1) * kw];
                        let orow = &mut od[obase + oy * wo..obase + (oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix0 = (ox * sw) as isize - pw as isize;
                            let mut acc = 0.0;
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += xrow[ix as usize] * wv;
                                }
                            }
                            *o += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv2d_general`] w.r.t. its input.
pub fn conv2d_grad_input(
    gout: &TensorND,
    w: &TensorND,
    stride: (usize, usize),
    pad: (usize, usize),
    input_hw: (usize, usize),
) -> Result<TensorND> {
    let (bs, co, ho, wo) = dims4(gout, "conv output gradient")?;
    let (co_w, ci, kh, kw) = dims4(w, "conv kernels")?;
    if co != co_w {
        return Err(Error::Shape(format!(
            "output gradient has {co} channels, kernels produce {co_w}"
        )));
    }
    let (h, wd) = input_hw;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let mut gin = TensorND::zeros(&[bs, ci, h, wd]);
    let gd = gout.data();
    let wdat = w.data();
    let gi = gin.data_mut();
    for b in 0..bs {
        for c_out in 0..co {
            let gbase = ((b * co + c_out) * ho) * wo;
            for c_in in 0..ci {
                let wbase = ((c_out * ci + c_in) * kh) * kw;
                let ibase = (b * ci + c_in) * h * wd;
                for oy in 0..ho {
                    let iy0 = (oy * sh) as isize - ph as isize;
                    let grow = &gd[gbase + oy * wo..gbase + (oy + 1) * wo];
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &mut gi[ibase + iy as usize * wd..ibase + (iy as usize + 1) * wd];
                        let wrow = &wdat[wbase + ky * kw..wbase + (ky + 1) * kw];
                        for (ox, &g) in grow.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let ix0 = (ox * sw) as isize - pw as isize;
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < wd as isize {
                                    irow[ix as usize] += g * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Gradient of [`conv2d_general`] w.r.t. the kernels.
pub fn conv2d_grad_kernel(
    x: &TensorND,
    gout: &TensorND,
    stride: (usize, usize),
    pad: (usize, usize),
    kernel_hw: (usize, usize),
) -> Result<TensorND> {
    let (bs, ci, h, wd) = dims4(x, "conv input")?;
    let (bs_g, co, ho, wo) = dims4(gout, "conv output gradient")?;
    if bs != bs_g {
        return Err(Error::Shape(format!(
            "batch mismatch between input ({bs}) and output gradient ({bs_g})"
        )));
    }
    let (kh, kw) = kernel_hw;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let mut gw = TensorND::zeros(&[co, ci, kh, kw]);
    let xd = x.data();
    let gd = gout.data();
    let gwd = gw.data_mut();
    for b in 0..bs {
        for c_out in 0..co {
            let gbase = ((b * co + c_out) * ho) * wo;
            for c_in in 0..ci {
                let wbase = ((c_out * ci + c_in) * kh) * kw;
                let xbase = (b * ci + c_in) * h * wd;
                for oy in 0..ho {
                    let iy0 = (oy * sh) as isize - ph as isize;
                    let grow = &gd[gbase + oy * wo..gbase + (oy + 1) * wo];
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xd[xbase + iy as usize * wd..xbase + (iy as usize + 1) * wd];
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for (ox, &g) in grow.iter().enumerate() {
                                let ix = (ox * sw) as isize - pw as isize + kx as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += g * xrow[ix as usize];
                                }
                            }
                            gwd[wbase + ky * kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// Standard cross-correlation with symmetric stride/padding.
pub fn conv2d(x: &TensorND, kernels: &TensorND, stride: usize, padding: usize) -> Result<TensorND> {
    conv2d_general(x, kernels, (stride, stride), (padding, padding))
}

/// Spatial size produced by a transposed convolution.
pub fn tconv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (input - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return Err(Error::Shape(format!(
            "transposed conv output would be empty (input {input}, k {k}, stride {stride}, pad {pad})"
        )));
    }
    Ok(grown - 2 * pad)
}

/// Adjoint of [`conv2d_general`] with the same kernels and hyperparameters.
///
/// Input is laid out in the convolution's *output* space `[B,Co,h,w]` and the
/// result in its *input* space `[B,Ci,H,W]`, so that
/// `<conv(x), y> == <x, tconv(y)>` holds exactly.
pub fn transposed_conv2d_general(
    y: &TensorND,
    w: &TensorND,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorND> {
    let (_, co, hin, win) = dims4(y, "transposed conv input")?;
    let (co_w, _, kh, kw) = dims4(w, "conv kernels")?;
    if co != co_w {
        return Err(Error::Shape(format!(
            "transposed conv input has {co} channels, kernels expect {co_w}"
        )));
    }
    let h = tconv_out_dim(hin, kh, stride.0, pad.0)?;
    let wd = tconv_out_dim(win, kw, stride.1, pad.1)?;
    conv2d_grad_input(y, w, stride, pad, (h, wd))
}

/// Adjoint convolution with symmetric stride/padding.
pub fn transposed_conv2d(
    input: &TensorND,
    kernels: &TensorND,
    stride: usize,
    padding: usize,
) -> Result<TensorND> {
    transposed_conv2d_general(input, kernels, (stride, stride), (padding, padding))
}

/// Gradient of the transposed convolution w.r.t. its input: a plain forward
/// convolution of the output gradient.
pub fn transposed_conv2d_grad_input(
    gout: &TensorND,
    w: &TensorND,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorND> {
    conv2d_general(gout, w, stride, pad)
}

/// Gradient of the transposed convolution w.r.t. the kernels.
pub fn transposed_conv2d_grad_kernel(
    y: &TensorND,
    gout: &TensorND,
    stride: (usize, usize),
    pad: (usize, usize),
    kernel_hw: (usize, usize),
) -> Result<TensorND> {
    // <g, tconv(y; k)> is the same bilinear form as <y, conv(g; k)>.
    conv2d_grad_kernel(gout, y, stride, pad, kernel_hw)
}

/// Broadcast a per-(batch, channel) bias over the spatial dimensions.
pub fn add_channel_bias(x: &TensorND, bias: &TensorND) -> Result<TensorND> {
    let (bs, c, h, w) = dims4(x, "bias target")?;
    let (bs_b, c_b) = dims2(bias, "channel bias")?;
    if bs != bs_b || c != c_b {
        return Err(Error::Shape(format!(
            "bias {:?} incompatible with feature map {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    let od = out.data_mut();
    let bd = bias.data();
    let spatial = h * w;
    for b in 0..bs {
        for ch in 0..c {
            let v = bd[b * c + ch];
            let base = (b * c + ch) * spatial;
            for o in &mut od[base..base + spatial] {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Backward of [`add_channel_bias`] w.r.t. the bias: sum over spatial dims.
pub fn sum_spatial(g: &TensorND) -> Result<TensorND> {
    let (bs, c, h, w) = dims4(g, "gradient")?;
    let mut out = TensorND::zeros(&[bs, c]);
    let gd = g.data();
    let od = out.data_mut();
    let spatial = h * w;
    for b in 0..bs {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            od[b * c + ch] = gd[base..base + spatial].iter().sum();
        }
    }
    Ok(out)
}

/// Rectified linear unit.
pub fn relu(x: &TensorND) -> TensorND {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &TensorND, gout: &TensorND) -> TensorND {
    let mut g = gout.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: &TensorND) -> TensorND {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward(x: &TensorND, gout: &TensorND) -> TensorND {
    let mut g = gout.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid_scalar(xv);
        *gv *= s * (1.0 - s);
    }
    g
}

/// SiLU / swish: `x * sigmoid(x)`.
pub fn silu(x: &TensorND) -> TensorND {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn silu_backward(x: &TensorND, gout: &TensorND) -> TensorND {
    let mut g = gout.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid_scalar(xv);
        *gv *= s * (1.0 + xv * (1.0 - s));
    }
    g
}

/// Affine layer: `x [B,I] * w^T [I,O] + b` -> `[B,O]`.
pub fn linear(x: &TensorND, w: &TensorND, b: &TensorND) -> Result<TensorND> {
    let (bs, inp) = dims2(x, "linear input")?;
    let (out_dim, inp_w) = dims2(w, "linear weight")?;
    if inp != inp_w || b.shape() != [out_dim] {
        return Err(Error::Shape(format!(
            "linear shapes incompatible: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = TensorND::zeros(&[bs, out_dim]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for bi in 0..bs {
        let xrow = &xd[bi * inp..(bi + 1) * inp];
        let orow = &mut od[bi * out_dim..(bi + 1) * out_dim];
        for (o, ov) in orow.iter_mut().enumerate() {
            let wrow = &wd[o * inp..(o + 1) * inp];
            let mut acc = bd[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *ov = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`linear`]: `(g_input, g_weight, g_bias)`.
pub fn linear_backward(
    x: &TensorND,
    w: &TensorND,
    gout: &TensorND,
) -> Result<(TensorND, TensorND, TensorND)> {
    let (bs, inp) = dims2(x, "linear input")?;
    let (out_dim, _) = dims2(w, "linear weight")?;
    let mut gx = TensorND::zeros(&[bs, inp]);
    let mut gw = TensorND::zeros(&[out_dim, inp]);
    let mut gb = TensorND::zeros(&[out_dim]);
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    {
        let gxd = gx.data_mut();
        for bi in 0..bs {
            let grow = &gd[bi * out_dim..(bi + 1) * out_dim];
            let gxrow = &mut gxd[bi * inp..(bi + 1) * inp];
            for (o, &g) in grow.iter().enumerate() {
                let wrow = &wd[o * inp..(o + 1) * inp];
                for (gxv, wv) in gxrow.iter_mut().zip(wrow) {
                    *gxv += g * wv;
                }
            }
        }
    }
    {
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for bi in 0..bs {
            let grow = &gd[bi * out_dim..(bi + 1) * out_dim];
            let xrow = &xd[bi * inp..(bi + 1) * inp];
            for (o, &g) in grow.iter().enumerate() {
                gbd[o] += g;
                let gwrow = &mut gwd[o * inp..(o + 1) * inp];
                for (gwv, xv) in gwrow.iter_mut().zip(xrow) {
                    *gwv += g * xv;
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

const GN_EPS: f64 = 1e-5;

/// Group normalization over `[B,C,H,W]` with per-channel affine parameters.
pub fn group_norm(x: &TensorND, gamma: &TensorND, beta: &TensorND, groups: usize) -> Result<TensorND> {
    let (bs, c, h, w) = dims4(x, "group norm input")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!(
            "{groups} groups do not divide {c} channels"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "affine params must be [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let cpg = c / groups;
    let spatial = h * w;
    let n = cpg * spatial;
    let mut out = TensorND::zeros(x.shape());
    let xd = x.data();
    let gm = gamma.data();
    let bt = beta.data();
    let od = out.data_mut();
    for b in 0..bs {
        for g in 0..groups {
            let start = (b * c + g * cpg) * spatial;
            let chunk = &xd[start..start + n];
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let base = start + cc * spatial;
                for i in 0..spatial {
                    od[base + i] = gm[ch] * ((xd[base + i] - mean) * inv) + bt[ch];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`group_norm`]: `(g_input, g_gamma, g_beta)`.
///
/// Statistics are recomputed from `x`, so no forward cache is needed.
pub fn group_norm_backward(
    x: &TensorND,
    gamma: &TensorND,
    groups: usize,
    gout: &TensorND,
) -> Result<(TensorND, TensorND, TensorND)> {
    let (bs, c, h, w) = dims4(x, "group norm input")?;
    let cpg = c / groups;
    let spatial = h * w;
    let n = cpg * spatial;
    let nf = n as f64;
    let mut gx = TensorND::zeros(x.shape());
    let mut ggamma = TensorND::zeros(&[c]);
    let mut gbeta = TensorND::zeros(&[c]);
    let xd = x.data();
    let gm = gamma.data();
    let gd = gout.data();
    let gxd = gx.data_mut();
    let ggd = ggamma.data_mut();
    let gbd = gbeta.data_mut();
    let mut xhat = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for b in 0..bs {
        for g in 0..groups {
            let start = (b * c + g * cpg) * spatial;
            let chunk = &xd[start..start + n];
            let mean = chunk.iter().sum::<f64>() / nf;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                for i in 0..spatial {
                    let idx = cc * spatial + i;
                    let xh = (xd[start + idx] - mean) * inv;
                    let go = gd[start + idx];
                    xhat[idx] = xh;
                    dxhat[idx] = go * gm[ch];
                    ggd[ch] += go * xh;
                    gbd[ch] += go;
                }
            }
            let mean_d = dxhat.iter().sum::<f64>() / nf;
            let mean_dx = dxhat.iter().zip(&xhat).map(|(d, xh)| d * xh).sum::<f64>() / nf;
            for i in 0..n {
                gxd[start + i] = inv * (dxhat[i] - mean_d - xhat[i] * mean_dx);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Row lookup: `table [N,D]`, one id per batch element -> `[B,D]`.
pub fn embedding(table: &TensorND, ids: &[usize]) -> Result<TensorND> {
    let (n, d) = dims2(table, "embedding table")?;
    let mut out = TensorND::zeros(&[ids.len(), d]);
    let td = table.data();
    let od = out.data_mut();
    for (b, &id) in ids.iter().enumerate() {
        if id >= n {
            return Err(Error::InvalidArgument(format!(
                "embedding id {id} out of range for table of {n}"
            )));
        }
        od[b * d..(b + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
    }
    Ok(out)
}

/// Backward of [`embedding`]: scatter-add rows of `gout` into a table-shaped gradient.
pub fn embedding_backward(table_shape: &[usize], ids: &[usize], gout: &TensorND) -> TensorND {
    let d = table_shape[1];
    let mut gt = TensorND::zeros(table_shape);
    let gd = gout.data();
    let gtd = gt.data_mut();
    for (b, &id) in ids.iter().enumerate() {
        for i in 0..d {
            gtd[id * d + i] += gd[b * d + i];
        }
    }
    gt
}

/// Sinusoidal position encoding of integer timesteps, one row per element.
///
/// `dim` must be even; row `b` is `[sin(t_b * f_0), ..., cos(t_b * f_0), ...]`
/// with frequencies `f_i = 10000^(-i/half)`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Result<TensorND> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal embedding dim must be even and >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = TensorND::zeros(&[ts.len(), dim]);
    let od = out.data_mut();
    for (b, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let angle = t as f64 * freq;
            od[b * dim + i] = angle.sin();
            od[b * dim + half + i] = angle.cos();
        }
    }
    Ok(out)
}

/// Mean squared error between two same-shaped tensors.
pub fn mse(a: &TensorND, b: &TensorND) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mse operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse`] w.r.t. its first argument: `2(a - b)/n`.
pub fn mse_backward(a: &TensorND, b: &TensorND) -> TensorND {
    let n = a.len() as f64;
    let mut g = a.clone();
    for (gv, &bv) in g.data_mut().iter_mut().zip(b.data()) {
        *gv = 2.0 * (*gv - bv) / n;
    }
    g
}

/// Softmax cross-entropy over logits `[B,C]` with integer labels.
///
/// Returns the batch-mean loss and the logits gradient `(softmax - onehot)/B`.
pub fn softmax_cross_entropy(logits: &TensorND, labels: &[usize]) -> Result<(f64, TensorND)> {
    let (bs, c) = dims2(logits, "logits")?;
    if labels.len() != bs {
        return Err(Error::Shape(format!(
            "{} labels for batch of {bs}",
            labels.len()
        )));
    }
    let mut grad = TensorND::zeros(&[bs, c]);
    let ld = logits.data();
    let gd = grad.data_mut();
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let row = &ld[b * c..(b + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += -(row[y] - max - denom.ln());
        for i in 0..c {
            let p = (row[i] - max).exp() / denom;
            gd[b * c + i] = (p - if i == y { 1.0 } else { 0.0 }) / bs as f64;
        }
    }
    Ok((loss / bs as f64, grad))
}

/// Concatenate two feature maps along the channel axis.
pub fn concat_channels(a: &TensorND, b: &TensorND) -> Result<TensorND> {
    let (bs, ca, h, w) = dims4(a, "concat lhs")?;
    let (bs_b, cb, hb, wb) = dims4(b, "concat rhs")?;
    if bs != bs_b || h != hb || w != wb {
        return Err(Error::Shape(format!(
            "concat operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let spatial = h * w;
    let mut out = TensorND::zeros(&[bs, ca + cb, h, w]);
    let od = out.data_mut();
    for bi in 0..bs {
        let abase = bi * ca * spatial;
        let bbase = bi * cb * spatial;
        let obase = bi * (ca + cb) * spatial;
        od[obase..obase + ca * spatial].copy_from_slice(&a.data()[abase..abase + ca * spatial]);
        od[obase + ca * spatial..obase + (ca + cb) * spatial]
            .copy_from_slice(&b.data()[bbase..bbase + cb * spatial]);
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &TensorND, ca: usize) -> Result<(TensorND, TensorND)> {
    let (bs, c, h, w) = dims4(g, "split input")?;
    if ca > c {
        return Err(Error::Shape(format!("cannot split {ca} channels from {c}")));
    }
    let cb = c - ca;
    let spatial = h * w;
    let mut a = TensorND::zeros(&[bs, ca, h, w]);
    let mut b = TensorND::zeros(&[bs, cb, h, w]);
    for bi in 0..bs {
        let gbase = bi * c * spatial;
        a.data_mut()[bi * ca * spatial..(bi + 1) * ca * spatial]
            .copy_from_slice(&g.data()[gbase..gbase + ca * spatial]);
        b.data_mut()[bi * cb * spatial..(bi + 1) * cb * spatial]
            .copy_from_slice(&g.data()[gbase + ca * spatial..gbase + c * spatial]);
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = TensorND::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = TensorND::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_sums() {
        let x = TensorND::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = TensorND::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn conv_rejects_incompatible_shapes() {
        let x = TensorND::zeros(&[1, 2, 4, 4]);
        let k = TensorND::zeros(&[1, 3, 2, 2]);
        let err = conv2d(&x, &k, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 2, 2]"), "{msg}");
    }

    #[test]
    fn conv_rejects_non_divisible_stride() {
        let x = TensorND::zeros(&[1, 1, 5, 5]);
        let k = TensorND::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &k, 2, 0).is_err());
    }

    #[test]
    fn tconv_stride1_unit_kernel_is_identity() {
        let y = TensorND::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let k = TensorND::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let x = transposed_conv2d(&y, &k, 1, 0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn tconv_doubles_spatial_size_for_stride2_k4_pad1() {
        let y = TensorND::zeros(&[1, 1, 4, 4]);
        let k = TensorND::zeros(&[1, 1, 4, 4]);
        let x = transposed_conv2d(&y, &k, 2, 1).unwrap();
        assert_eq!(x.shape(), &[1, 1, 8, 8]);
        // Matches the inverse of the conv output-shape formula.
        assert_eq!(conv_out_dim(8, 4, 2, 1).unwrap(), 4);
    }

    #[test]
    fn linear_known_values() {
        let x = TensorND::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = TensorND::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = TensorND::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5]);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let x = TensorND::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, -1.0, 5.0]).unwrap();
        let gamma = TensorND::filled(&[2], 1.0);
        let beta = TensorND::zeros(&[2]);
        let y = group_norm(&x, &gamma, &beta, 2).unwrap();
        // Each group has mean 0 afterwards.
        assert!((y.data()[0] + y.data()[1]).abs() < 1e-12);
        assert!((y.data()[2] + y.data()[3]).abs() < 1e-12);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = TensorND::zeros(&[3, 4]);
        assert!(embedding(&table, &[3]).is_err());
        assert!(embedding(&table, &[2]).is_ok());
    }

    #[test]
    fn sinusoidal_rows_differ_per_timestep() {
        let e = sinusoidal_embedding(&[1, 2], 8).unwrap();
        let (a, b) = e.data().split_at(8);
        assert_ne!(a, b);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let logits = TensorND::zeros(&[1, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((grad.data()[2] - (0.25 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = TensorND::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = TensorND::from_vec(&[1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cat = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&cat, 1).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
