//! Dense and depthwise 2D cross-correlation with analytic gradients.
//!
//! Per output element the accumulation order is fixed as bias, then
//! (kernel-row, kernel-col, in-channel), so forward passes are bit-identical
//! across runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that keeps the spatial extent at stride 1 (odd kernels).
    #[default]
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    /// (row, column) dilation.
    pub dilation: (usize, usize),
    pub padding: Padding,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            dilation: (1, 1),
            padding: Padding::Same,
        }
    }
}

impl Conv2dConfig {
    pub fn strided(stride: usize) -> Self {
        Conv2dConfig {
            stride,
            ..Self::default()
        }
    }

    pub fn dilated(dh: usize, dw: usize) -> Self {
        Conv2dConfig {
            dilation: (dh, dw),
            ..Self::default()
        }
    }

    pub fn valid() -> Self {
        Conv2dConfig {
            padding: Padding::Valid,
            ..Self::default()
        }
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub stride: usize,
    pub dh: usize,
    pub dw: usize,
}

impl Geometry {
    pub fn new(
        op: &'static str,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        cfg: &Conv2dConfig,
    ) -> Result<Self> {
        if cfg.stride == 0 || cfg.dilation.0 == 0 || cfg.dilation.1 == 0 {
            return Err(Error::invalid(op, "stride and dilation must be positive"));
        }
        let (dh, dw) = cfg.dilation;
        let (pad_h, pad_w) = match cfg.padding {
            Padding::Same => {
                if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
                    return Err(Error::invalid(
                        op,
                        format!("same padding needs odd kernels, got {kh}x{kw}"),
                    ));
                }
                (dh * (kh - 1) / 2, dw * (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        let span_h = dh * (kh - 1) + 1;
        let span_w = dw * (kw - 1) + 1;
        if h + 2 * pad_h < span_h || w + 2 * pad_w < span_w {
            return Err(Error::invalid(
                op,
                format!(
                    "kernel span {span_h}x{span_w} exceeds padded input {}x{}",
                    h + 2 * pad_h,
                    w + 2 * pad_w
                ),
            ));
        }
        Ok(Geometry {
            h,
            w,
            oh: (h + 2 * pad_h - span_h) / cfg.stride + 1,
            ow: (w + 2 * pad_w - span_w) / cfg.stride + 1,
            pad_h,
            pad_w,
            stride: cfg.stride,
            dh,
            dw,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o * stride + k * dilation - pad` lies inside `[0, len)`.
    #[inline]
    fn span(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if offset >= 0 {
            0
        } else {
            (-offset + s - 1) / s
        };
        let hi_excl = (in_len as isize - offset + s - 1) / s;
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi_excl.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    #[inline]
    pub fn rows(&self, ky: usize) -> (usize, usize, isize) {
        let off = (ky * self.dh) as isize - self.pad_h as isize;
        let (a, b) = Self::span(self.oh, self.h, self.stride, off);
        (a, b, off)
    }

    #[inline]
    pub fn cols(&self, kx: usize) -> (usize, usize, isize) {
        let off = (kx * self.dw) as isize - self.pad_w as isize;
        let (a, b) = Self::span(self.ow, self.w, self.stride, off);
        (a, b, off)
    }
}

fn weight_dims(op: &'static str, w: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match *w.shape() {
        [o, i, kh, kw] => Ok((o, i, kh, kw)),
        _ => Err(Error::invalid(
            op,
            format!("weights must be (out,in,kh,kw), got {:?}", w.shape()),
        )),
    }
}

/// Spatial extent produced by a convolution, without running it.
pub fn conv2d_output_extent(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: &Conv2dConfig,
) -> Result<(usize, usize)> {
    let g = Geometry::new("conv2d", h, w, kh, kw, cfg)?;
    Ok((g.oh, g.ow))
}

/// Cross-correlation of a `(C_in, H, W)` map with `(C_out, C_in, kh, kw)` weights.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    cfg: &Conv2dConfig,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (ci, h, wd) = x.chw(OP)?;
    let (co, wi, kh, kw) = weight_dims(OP, w)?;
    if wi != ci {
        return Err(Error::shape(OP, &[co, ci, kh, kw], w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::shape(OP, &[co], b.shape()));
        }
    }
    let g = Geometry::new(OP, h, wd, kh, kw, cfg)?;
    let plane_in = h * wd;
    let plane_out = g.oh * g.ow;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); co * plane_out];
    for o in 0..co {
        let dst = &mut out[o * plane_out..(o + 1) * plane_out];
        if let Some(b) = b {
            dst.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        for ky in 0..kh {
            let (r0, r1, roff) = g.rows(ky);
            if r0 >= r1 {
                continue;
            }
            for kx in 0..kw {
                let (c0, c1, coff) = g.cols(kx);
                if c0 >= c1 {
                    continue;
                }
                for c in 0..ci {
                    let wv = ws[((o * ci + c) * kh + ky) * kw + kx];
                    let src = &xs[c * plane_in..(c + 1) * plane_in];
                    for oy in r0..r1 {
                        let iy = (oy * g.stride) as isize + roff;
                        let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let start = (c0 as isize + coff) as usize;
                            for (d, &s) in
                                drow[c0..c1].iter_mut().zip(&row[start..start + (c1 - c0)])
                            {
                                *d += wv * s;
                            }
                        } else {
                            for ox in c0..c1 {
                                let ix = (ox * g.stride) as isize + coff;
                                drow[ox] += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, g.oh, g.ow], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Gradients of [`conv2d`] for the output cotangent `gy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &Conv2dConfig,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    let (ci, h, wd) = x.chw(OP)?;
    let (co, _, kh, kw) = weight_dims(OP, w)?;
    let g = Geometry::new(OP, h, wd, kh, kw, cfg)?;
    if gy.shape() != [co, g.oh, g.ow] {
        return Err(Error::shape(OP, &[co, g.oh, g.ow], gy.shape()));
    }
    let plane_in = h * wd;
    let plane_out = g.oh * g.ow;
    let xs = x.data();
    let ws = w.data();
    let gys = gy.data();
    let mut gx = vec![T::zero(); xs.len()];
    let mut gw = vec![T::zero(); ws.len()];
    let mut gb = vec![T::zero(); co];
    for o in 0..co {
        let gplane = &gys[o * plane_out..(o + 1) * plane_out];
        gb[o] = gplane.iter().copied().sum();
        for ky in 0..kh {
            let (r0, r1, roff) = g.rows(ky);
            if r0 >= r1 {
                continue;
            }
            for kx in 0..kw {
                let (c0, c1, coff) = g.cols(kx);
                if c0 >= c1 {
                    continue;
                }
                for c in 0..ci {
                    let widx = ((o * ci + c) * kh + ky) * kw + kx;
                    let wv = ws[widx];
                    let mut acc = T::zero();
                    for oy in r0..r1 {
                        let iy = ((oy * g.stride) as isize + roff) as usize;
                        let base = c * plane_in + iy * wd;
                        for ox in c0..c1 {
                            let ix = ((ox * g.stride) as isize + coff) as usize;
                            let gv = gplane[oy * g.ow + ox];
                            acc += gv * xs[base + ix];
                            gx[base + ix] += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        x: Tensor::from_vec(x.shape(), gx)?,
        w: Tensor::from_vec(w.shape(), gw)?,
        b: Tensor::from_vec(&[co], gb)?,
    })
}

/// Per-channel cross-correlation with `(C, 1, kh, kw)` weights.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &Conv2dConfig,
) -> Result<Tensor<T>> {
    const OP: &str = "depthwise_conv2d";
    let (c, h, wd) = x.chw(OP)?;
    let (wc, one, kh, kw) = weight_dims(OP, w)?;
    if wc != c || one != 1 {
        return Err(Error::shape(OP, &[c, 1, kh, kw], w.shape()));
    }
    let g = Geometry::new(OP, h, wd, kh, kw, cfg)?;
    let plane_in = h * wd;
    let plane_out = g.oh * g.ow;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); c * plane_out];
    for ch in 0..c {
        let dst = &mut out[ch * plane_out..(ch + 1) * plane_out];
        let src = &xs[ch * plane_in..(ch + 1) * plane_in];
        for ky in 0..kh {
            let (r0, r1, roff) = g.rows(ky);
            if r0 >= r1 {
                continue;
            }
            for kx in 0..kw {
                let (c0, c1, coff) = g.cols(kx);
                if c0 >= c1 {
                    continue;
                }
                let wv = ws[(ch * kh + ky) * kw + kx];
                for oy in r0..r1 {
                    let iy = ((oy * g.stride) as isize + roff) as usize;
                    for ox in c0..c1 {
                        let ix = ((ox * g.stride) as isize + coff) as usize;
                        dst[oy * g.ow + ox] += wv * src[iy * wd + ix];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, g.oh, g.ow], out)
}

/// Gradients of [`depthwise_conv2d`]; returns `(grad_x, grad_w)`.
pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &Conv2dConfig,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "depthwise_conv2d_backward";
    let (c, h, wd) = x.chw(OP)?;
    let (_, _, kh, kw) = weight_dims(OP, w)?;
    let g = Geometry::new(OP, h, wd, kh, kw, cfg)?;
    if gy.shape() != [c, g.oh, g.ow] {
        return Err(Error::shape(OP, &[c, g.oh, g.ow], gy.shape()));
    }
    let plane_in = h * wd;
    let plane_out = g.oh * g.ow;
    let xs = x.data();
    let ws = w.data();
    let gys = gy.data();
    let mut gx = vec![T::zero(); xs.len()];
    let mut gw = vec![T::zero(); ws.len()];
    for ch in 0..c {
        for ky in 0..kh {
            let (r0, r1, roff) = g.rows(ky);
            if r0 >= r1 {
                continue;
            }
            for kx in 0..kw {
                let (c0, c1, coff) = g.cols(kx);
                if c0 >= c1 {
                    continue;
                }
                let widx = (ch * kh + ky) * kw + kx;
                let wv = ws[widx];
                let mut acc = T::zero();
                for oy in r0..r1 {
                    let iy = ((oy * g.stride) as isize + roff) as usize;
                    for ox in c0..c1 {
                        let ix = ((ox * g.stride) as isize + coff) as usize;
                        let gv = gys[ch * plane_out + oy * g.ow + ox];
                        let xi = ch * plane_in + iy * wd + ix;
                        acc += gv * xs[xi];
                        gx[xi] += wv * gv;
                    }
                }
                gw[widx] += acc;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
    ))
}

/// Depthwise conv followed by a 1x1 pointwise conv, without biases.
pub fn depthwise_separable_conv<T: Scalar>(
    x: &Tensor<T>,
    dw: &Tensor<T>,
    pw: &Tensor<T>,
    dilation: (usize, usize),
) -> Result<Tensor<T>> {
    let (c, ..) = x.chw("depthwise_separable_conv")?;
    match *pw.shape() {
        [_, pc, 1, 1] if pc == c => {}
        _ => {
            let co = pw.shape().first().copied().unwrap_or(0);
            return Err(Error::shape(
                "depthwise_separable_conv",
                &[co, c, 1, 1],
                pw.shape(),
            ));
        }
    }
    let mid = depthwise_conv2d(x, dw, &Conv2dConfig::dilated(dilation.0, dilation.1))?;
    conv2d(&mid, pw, None, &Conv2dConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn delta_kernel_same_padding_is_identity() {
        let x = Tensor::<f32>::from_fn(&[1, 3, 3], |i| i as f32 * 0.5 - 1.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), &Conv2dConfig::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_input_all_ones_valid() {
        let c = 1.75_f32;
        let x = Tensor::full(&[1, 5, 4], c);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, &Conv2dConfig::valid()).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0 * c));
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, &Conv2dConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[1, 2, 3, 3]") && msg.contains("[1, 3, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::<f32>::zeros(&[1, 64, 256]);
        let w = Tensor::zeros(&[4, 1, 3, 3]);
        let y = conv2d(&x, &w, None, &Conv2dConfig::strided(2)).unwrap();
        assert_eq!(y.shape(), &[4, 32, 128]);
    }

    #[test]
    fn strided_dilated_matches_naive() {
        let x = Tensor::<f64>::from_fn(&[2, 7, 9], |i| ((i * 37 % 11) as f64) - 5.0);
        let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 7) as f64) * 0.25 - 0.5);
        let cfg = Conv2dConfig {
            stride: 2,
            dilation: (2, 1),
            padding: Padding::Same,
        };
        let y = conv2d(&x, &w, None, &cfg).unwrap();
        let (oh, ow) = (y.shape()[1], y.shape()[2]);
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky * 2) as isize - 2;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 7 || ix >= 9 {
                                    continue;
                                }
                                acc += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * x.data()[(c * 7 + iy as usize) * 9 + ix as usize];
                            }
                        }
                    }
                    assert_eq!(y.data()[(o * oh + oy) * ow + ox], acc);
                }
            }
        }
    }

    #[test]
    fn separable_with_delta_and_scalar_two_doubles_input() {
        let x = Tensor::<f32>::from_fn(&[1, 4, 5], |i| i as f32 - 7.0);
        let mut dw = Tensor::zeros(&[1, 1, 3, 3]);
        dw.data_mut()[4] = 1.0;
        let pw = t(&[1, 1, 1, 1], &[2.0]);
        let y = depthwise_separable_conv(&x, &dw, &pw, (1, 1)).unwrap();
        assert_eq!(y, x.map(|v| 2.0 * v));
    }

    #[test]
    fn separable_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let dw = Tensor::zeros(&[2, 1, 3, 3]);
        let pw = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(matches!(
            depthwise_separable_conv(&x, &dw, &pw, (1, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
