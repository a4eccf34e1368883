//! Pointwise and per-pixel operators.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Leaky ReLU slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid expressed through its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(gy, "sigmoid_backward", |s, g| g * s * (T::one() - s))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar>(
    x: &Tensor<T>,
    slope: T,
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.zip_map(gy, "leaky_relu_backward", |v, g| {
        if v > T::zero() {
            g
        } else {
            g * slope
        }
    })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

/// Softmax over the channel axis of a (C,H,W) map, independently per pixel.
pub fn softmax_channelwise<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw("softmax_channelwise")?;
    let n = h * w;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for p in 0..n {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(xs[k * n + p]);
        }
        let mut z = T::zero();
        for k in 0..c {
            let e = (xs[k * n + p] - m).exp();
            out[k * n + p] = e;
            z += e;
        }
        for k in 0..c {
            out[k * n + p] /= z;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Backward of softmax expressed through its output `y`.
pub fn softmax_channelwise_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = y.chw("softmax_channelwise_backward")?;
    if gy.shape() != y.shape() {
        return Err(Error::shape(
            "softmax_channelwise_backward",
            y.shape(),
            gy.shape(),
        ));
    }
    let n = h * w;
    let (ys, gs) = (y.data(), gy.data());
    let mut gx = vec![T::zero(); ys.len()];
    for p in 0..n {
        let mut dot = T::zero();
        for k in 0..c {
            dot += ys[k * n + p] * gs[k * n + p];
        }
        for k in 0..c {
            gx[k * n + p] = ys[k * n + p] * (gs[k * n + p] - dot);
        }
    }
    Tensor::from_vec(y.shape(), gx)
}

/// Concatenates (C_i,H,W) maps along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
    let (_, h, w) = first.chw("concat_channels")?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.chw("concat_channels")?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape("concat_channels", &[c, h, w], p.shape()));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[channels, h, w], data)
}

/// Splits a concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = g.chw("split_channels")?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::invalid(
            "split_channels",
            format!("parts {channels:?} do not sum to {c}"),
        ));
    }
    let plane = h * w;
    let mut start = 0;
    channels
        .iter()
        .map(|&k| {
            let part = Tensor::from_vec(
                &[k, h, w],
                g.data()[start * plane..(start + k) * plane].to_vec(),
            );
            start += k;
            part
        })
        .collect()
}

/// Cached statistics of a per-channel normalization.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel normalization over the spatial extent with learned
/// scale `gamma` and shift `beta` (both of shape `[C]`).
pub fn channel_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (c, h, w) = x.chw("channel_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("channel_norm", &[c], gamma.shape()));
    }
    let n = h * w;
    let inv_n = T::one() / T::lit(n as f64);
    let eps = T::lit(NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let p = x.channel(ch);
        let mean = p.iter().copied().sum::<T>() * inv_n;
        let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..n {
            let xh = (p[i] - mean) * is;
            xhat[ch * n + i] = xh;
            out[ch * n + i] = g * xh + b;
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), out)?,
        NormCache {
            normalized: Tensor::from_vec(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Gradients of [`channel_norm`]; returns `(grad_x, grad_gamma, grad_beta)`.
pub fn channel_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = gy.chw("channel_norm_backward")?;
    let n = h * w;
    let nf = T::lit(n as f64);
    let xh = cache.normalized.data();
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let g = gy.channel(ch);
        let xc = &xh[ch * n..(ch + 1) * n];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xc).map(|(&a, &b)| a * b).sum();
        gb[ch] = sum_g;
        gg[ch] = sum_gx;
        let k = gamma.data()[ch] * cache.inv_std[ch] / nf;
        for i in 0..n {
            gx[ch * n + i] = k * (nf * g[i] - sum_g - xc[i] * sum_gx);
        }
    }
    Ok((
        Tensor::from_vec(gy.shape(), gx)?,
        Tensor::from_vec(&[c], gg)?,
        Tensor::from_vec(&[c], gb)?,
    ))
}
