//! Forward/backward kernels of the range-aware operators.

use crate::error::{Error, Result};
use crate::kernels::{bilinear_sample, bilinear_sample_backward, SamplePadding};
use crate::range_ops::grid::ProximityGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The 3x3 canonical tap offsets `(d_row, d_col)` in row-major order.
pub const TAPS_3X3: [(i32, i32); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn proximity_weight_dims<T: Scalar>(
    op: &'static str,
    w: &Tensor<T>,
    k: usize,
) -> Result<(usize, usize)> {
    let s = w.shape();
    let ok = match s.len() {
        3 => s[2] == k,
        4 => s[2] * s[3] == k,
        _ => false,
    };
    if !ok {
        let mut expected = s.iter().take(2).copied().collect::<Vec<_>>();
        expected.push(k);
        return Err(Error::shape(op, &expected, s));
    }
    Ok((s[0], s[1]))
}

/// `y(p) = b + sum_i w_i * x(p + n_i(p))` over the grid's sorted neighbours.
///
/// Weights are `(C_out, C_in, k)` or `(C_out, C_in, kh, kw)` with `kh*kw = k`
/// laid out row-major; slot `i` pairs with the `i`-th listed neighbour.
pub fn proximity_conv<T: Scalar>(
    x: &Tensor<T>,
    grid: &ProximityGrid,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    const OP: &str = "proximity_conv";
    let (ci, h, wd) = x.chw(OP)?;
    if (h, wd) != (grid.height(), grid.width()) {
        return Err(Error::shape(OP, &[grid.height(), grid.width()], &[h, wd]));
    }
    let k = grid.k();
    let (co, wi) = proximity_weight_dims(OP, w, k)?;
    if wi != ci {
        return Err(Error::shape(OP, &[co, ci, k], w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::shape(OP, &[co], b.shape()));
        }
    }
    let n = h * wd;
    let src = grid.source_indices();
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![T::zero(); co * n];
    for o in 0..co {
        let bias = b.map_or(T::zero(), |b| b.data()[o]);
        for p in 0..n {
            let mut acc = bias;
            for i in 0..k {
                if let Some(q) = src[p * k + i] {
                    for c in 0..ci {
                        acc += ws[(o * ci + c) * k + i] * xs[c * n + q];
                    }
                }
            }
            out[o * n + p] = acc;
        }
    }
    Tensor::from_vec(&[co, h, wd], out)
}

/// Gradients of [`proximity_conv`]; the grid itself is not differentiable.
pub fn proximity_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    grid: &ProximityGrid,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    const OP: &str = "proximity_conv_backward";
    let (ci, h, wd) = x.chw(OP)?;
    let k = grid.k();
    let (co, _) = proximity_weight_dims(OP, w, k)?;
    if gy.shape() != [co, h, wd] {
        return Err(Error::shape(OP, &[co, h, wd], gy.shape()));
    }
    let n = h * wd;
    let src = grid.source_indices();
    let (xs, ws, gs) = (x.data(), w.data(), gy.data());
    let mut gx = vec![T::zero(); xs.len()];
    let mut gw = vec![T::zero(); ws.len()];
    let mut gb = vec![T::zero(); co];
    for o in 0..co {
        for p in 0..n {
            let g = gs[o * n + p];
            gb[o] += g;
            for i in 0..k {
                if let Some(q) = src[p * k + i] {
                    for c in 0..ci {
                        let wi = (o * ci + c) * k + i;
                        gw[wi] += g * xs[c * n + q];
                        gx[c * n + q] += g * ws[wi];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        Tensor::from_vec(&[co], gb)?,
    ))
}

/// Sampling coordinates `p + d(p) * tap` for one canonical tap.
pub(crate) fn tap_coords<T: Scalar>(d: &Tensor<T>, tap: (i32, i32)) -> Tensor<T> {
    let (h, w) = (d.shape()[1], d.shape()[2]);
    let n = h * w;
    let (tr, tc) = (T::lit(tap.0 as f64), T::lit(tap.1 as f64));
    let mut data = vec![T::zero(); 2 * n];
    for p in 0..n {
        let dv = d.data()[p];
        data[p] = T::lit((p / w) as f64) + dv * tr;
        data[n + p] = T::lit((p % w) as f64) + dv * tc;
    }
    Tensor::from_vec(&[2, h, w], data).expect("coordinate extent")
}

fn check_rate<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw(op)?;
    if d.shape() != [1, h, w] {
        return Err(Error::shape(op, &[1, h, w], d.shape()));
    }
    Ok((c, h, w))
}

/// Gathers the nine bilinearly interpolated neighbours `x(p + d(p) * tap)`
/// of every pixel. Output is `(9 * C, H, W)`, tap-major.
pub fn range_guided_gather<T: Scalar>(x: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_rate("range_guided_gather", x, d)?;
    let mut data = Vec::with_capacity(9 * c * h * w);
    for &tap in &TAPS_3X3 {
        let s = bilinear_sample(x, &tap_coords(d, tap), SamplePadding::Zeros)?;
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&[9 * c, h, w], data)
}

/// Gradients of [`range_guided_gather`]; returns `(grad_x, grad_rate)`.
pub fn range_guided_gather_backward<T: Scalar>(
    x: &Tensor<T>,
    d: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "range_guided_gather_backward";
    let (c, h, w) = check_rate(OP, x, d)?;
    if gy.shape() != [9 * c, h, w] {
        return Err(Error::shape(OP, &[9 * c, h, w], gy.shape()));
    }
    let n = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gd = vec![T::zero(); n];
    for (t, &tap) in TAPS_3X3.iter().enumerate() {
        let g = Tensor::from_vec(&[c, h, w], gy.data()[t * c * n..(t + 1) * c * n].to_vec())?;
        let (gxt, gc) = bilinear_sample_backward(x, &tap_coords(d, tap), SamplePadding::Zeros, &g)?;
        gx.add_assign(&gxt)?;
        let (tr, tc) = (T::lit(tap.0 as f64), T::lit(tap.1 as f64));
        for p in 0..n {
            gd[p] += gc.data()[p] * tr + gc.data()[n + p] * tc;
        }
    }
    Ok((gx, Tensor::from_vec(&[1, h, w], gd)?))
}

/// Depthwise combination of gathered taps: `y[c] = sum_t w[c, t] * g[t, c]`
/// with depthwise weights `(C, 1, 3, 3)`.
pub fn tap_combine<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "tap_combine";
    let (c9, h, wd) = g.chw(OP)?;
    let c = c9 / 9;
    if c9 % 9 != 0 || w.shape() != [c, 1, 3, 3] {
        return Err(Error::shape(OP, &[c, 1, 3, 3], w.shape()));
    }
    let n = h * wd;
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        let dst = &mut out[ch * n..(ch + 1) * n];
        for t in 0..9 {
            let wv = w.data()[ch * 9 + t];
            let src = &g.data()[(t * c + ch) * n..(t * c + ch + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    }
    Tensor::from_vec(&[c, h, wd], out)
}

pub fn tap_combine_backward<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "tap_combine_backward";
    let (c9, h, wd) = g.chw(OP)?;
    let c = c9 / 9;
    if gy.shape() != [c, h, wd] {
        return Err(Error::shape(OP, &[c, h, wd], gy.shape()));
    }
    let n = h * wd;
    let mut gg = vec![T::zero(); g.len()];
    let mut gw = vec![T::zero(); w.len()];
    for ch in 0..c {
        let gyc = gy.channel(ch);
        for t in 0..9 {
            let wv = w.data()[ch * 9 + t];
            let base = (t * c + ch) * n;
            let mut acc = T::zero();
            for p in 0..n {
                acc += gyc[p] * g.data()[base + p];
                gg[base + p] = wv * gyc[p];
            }
            gw[ch * 9 + t] = acc;
        }
    }
    Ok((
        Tensor::from_vec(g.shape(), gg)?,
        Tensor::from_vec(w.shape(), gw)?,
    ))
}
