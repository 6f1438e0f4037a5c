//! Differentiable building blocks shared by the networks and the blur.

use candle_core::{Device, Tensor};

use crate::error::Result;

/// Source index for position `i` (which may lie in the padding) under
/// reflection without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as u32
}

fn reflect_indices(n: usize, pad: usize, device: &Device) -> Result<Tensor> {
    let idx: Vec<u32> = (-(pad as isize)..(n + pad) as isize)
        .map(|i| reflect_index(i, n))
        .collect();
    let len = idx.len();
    Ok(Tensor::from_vec(idx, len, device)?)
}

/// Reflect-pads the last two dimensions of an `(N, C, H, W)` tensor.
pub fn reflect_pad(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.clone();
    if pad_h > 0 {
        out = out.index_select(&reflect_indices(h, pad_h, x.device())?, 2)?;
    }
    if pad_w > 0 {
        out = out.index_select(&reflect_indices(w, pad_w, x.device())?, 3)?;
    }
    Ok(out)
}

/// 2-D convolution plus a per-channel bias.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let y = x.conv2d(weight, padding, stride, 1, 1)?;
    let c = bias.dim(0)?;
    Ok(y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// Same-size convolution with reflect padding (odd kernels only).
pub fn conv2d_reflect(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let k = weight.dim(2)?;
    let p = k / 2;
    conv2d(&reflect_pad(x, p, p)?, weight, bias, 0, 1)
}

/// Instance normalisation without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + EPS)?.sqrt()?)?)
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

/// 2x2 max pooling with stride 2 via reshape-and-reduce, so the gradient
/// flows undiluted to the arg-max.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let x = x.narrow(2, 0, h / 2 * 2)?.narrow(3, 0, w / 2 * 2)?.contiguous()?;
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Interpolation matrix `(out, in)` for 1-D bilinear resampling with
/// half-pixel centers.
fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let f = src - lo as f64;
        m[o * input + lo] += 1.0 - f;
        m[o * input + hi] += f;
    }
    m
}

/// Differentiable bilinear resize of an `(N, C, H, W)` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    // rows: (out_h, h) x (N, C, h, w) -> (N, C, out_h, w)
    let lead = x.dims()[..2].to_vec();
    let y = rh.broadcast_left(lead.clone())?.contiguous()?.matmul(&x.contiguous()?)?;
    let y = y.matmul(&rw.t()?.contiguous()?.broadcast_left(lead)?.contiguous()?)?;
    Ok(y)
}
