//! Bilinear sampling, resizing and pooling.

use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How coordinates outside the map are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplePadding {
    /// Coordinates clamp to the border pixels.
    #[default]
    Clamp,
    /// Corners outside the map read as zero, matching zero-padded convolution.
    Zeros,
}

#[derive(Clone, Copy, Debug)]
struct Corner {
    r0: isize,
    c0: isize,
    fr: f64,
    fc: f64,
    // d(clamped coordinate) / d(raw coordinate)
    dr: f64,
    dc: f64,
}

#[inline]
fn locate(r: f64, c: f64, h: usize, w: usize, mode: SamplePadding) -> Corner {
    match mode {
        SamplePadding::Clamp => {
            let (hmax, wmax) = ((h - 1) as f64, (w - 1) as f64);
            let (rc, dr) = if r <= 0.0 {
                (0.0, 0.0)
            } else if r >= hmax {
                (hmax, 0.0)
            } else {
                (r, 1.0)
            };
            let (cc, dc) = if c <= 0.0 {
                (0.0, 0.0)
            } else if c >= wmax {
                (wmax, 0.0)
            } else {
                (c, 1.0)
            };
            let r0 = rc.floor();
            let c0 = cc.floor();
            Corner {
                r0: r0 as isize,
                c0: c0 as isize,
                fr: rc - r0,
                fc: cc - c0,
                dr,
                dc,
            }
        }
        SamplePadding::Zeros => {
            let r0 = r.floor();
            let c0 = c.floor();
            Corner {
                r0: r0 as isize,
                c0: c0 as isize,
                fr: r - r0,
                fc: c - c0,
                dr: 1.0,
                dc: 1.0,
            }
        }
    }
}

#[inline]
fn read<T: Scalar>(plane: &[T], h: usize, w: usize, r: isize, c: isize, mode: SamplePadding) -> T {
    match mode {
        SamplePadding::Clamp => {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            plane[r * w + c]
        }
        SamplePadding::Zeros => {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                T::zero()
            } else {
                plane[r as usize * w + c as usize]
            }
        }
    }
}

fn check_coords<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = x.chw(op)?;
    if h == 0 || w == 0 {
        return Err(Error::invalid(op, "cannot sample an empty map"));
    }
    match *coords.shape() {
        [2, oh, ow] => Ok((c, h, w, oh, ow)),
        _ => Err(Error::invalid(
            op,
            format!("coords must be (2, H, W), got {:?}", coords.shape()),
        )),
    }
}

/// Samples `x` (C,H,W) at fractional `(row, col)` positions given by `coords`
/// (2,H',W'), producing (C,H',W').
pub fn bilinear_sample<T: Scalar>(
    x: &Tensor<T>,
    coords: &Tensor<T>,
    mode: SamplePadding,
) -> Result<Tensor<T>> {
    let (ch, h, w, oh, ow) = check_coords("bilinear_sample", x, coords)?;
    let n = oh * ow;
    let (rows, cols) = coords.data().split_at(n);
    let mut out = vec![T::zero(); ch * n];
    for p in 0..n {
        let k = locate(rows[p].to_f64_lossy(), cols[p].to_f64_lossy(), h, w, mode);
        let (fr, fc) = (T::lit(k.fr), T::lit(k.fc));
        let one = T::one();
        for c in 0..ch {
            let plane = x.channel(c);
            let v00 = read(plane, h, w, k.r0, k.c0, mode);
            let v01 = read(plane, h, w, k.r0, k.c0 + 1, mode);
            let v10 = read(plane, h, w, k.r0 + 1, k.c0, mode);
            let v11 = read(plane, h, w, k.r0 + 1, k.c0 + 1, mode);
            out[c * n + p] =
                (one - fr) * ((one - fc) * v00 + fc * v01) + fr * ((one - fc) * v10 + fc * v11);
        }
    }
    Tensor::from_vec(&[ch, oh, ow], out)
}

/// Gradients of [`bilinear_sample`]; returns `(grad_x, grad_coords)`.
pub fn bilinear_sample_backward<T: Scalar>(
    x: &Tensor<T>,
    coords: &Tensor<T>,
    mode: SamplePadding,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ch, h, w, oh, ow) = check_coords("bilinear_sample_backward", x, coords)?;
    if gy.shape() != [ch, oh, ow] {
        return Err(Error::shape(
            "bilinear_sample_backward",
            &[ch, oh, ow],
            gy.shape(),
        ));
    }
    let n = oh * ow;
    let (rows, cols) = coords.data().split_at(n);
    let mut gx = vec![T::zero(); x.len()];
    let mut gc = vec![T::zero(); 2 * n];
    let one = T::one();
    for p in 0..n {
        let k = locate(rows[p].to_f64_lossy(), cols[p].to_f64_lossy(), h, w, mode);
        let (fr, fc) = (T::lit(k.fr), T::lit(k.fc));
        let mut grow = T::zero();
        let mut gcol = T::zero();
        for c in 0..ch {
            let g = gy.data()[c * n + p];
            let plane = x.channel(c);
            let v00 = read(plane, h, w, k.r0, k.c0, mode);
            let v01 = read(plane, h, w, k.r0, k.c0 + 1, mode);
            let v10 = read(plane, h, w, k.r0 + 1, k.c0, mode);
            let v11 = read(plane, h, w, k.r0 + 1, k.c0 + 1, mode);
            grow += g * ((one - fc) * (v10 - v00) + fc * (v11 - v01));
            gcol += g * ((one - fr) * (v01 - v00) + fr * (v11 - v10));
            let base = c * h * w;
            let mut scatter = |r: isize, cc: isize, wt: T| {
                let (r, cc) = match mode {
                    SamplePadding::Clamp => {
                        (r.clamp(0, h as isize - 1), cc.clamp(0, w as isize - 1))
                    }
                    SamplePadding::Zeros => {
                        if r < 0 || cc < 0 || r >= h as isize || cc >= w as isize {
                            return;
                        }
                        (r, cc)
                    }
                };
                gx[base + r as usize * w + cc as usize] += wt * g;
            };
            scatter(k.r0, k.c0, (one - fr) * (one - fc));
            scatter(k.r0, k.c0 + 1, (one - fr) * fc);
            scatter(k.r0 + 1, k.c0, fr * (one - fc));
            scatter(k.r0 + 1, k.c0 + 1, fr * fc);
        }
        gc[p] = grow * T::lit(k.dr);
        gc[n + p] = gcol * T::lit(k.dc);
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(coords.shape(), gc)?,
    ))
}

/// Feeds the interpolation cell (and clamp state) of every coordinate into
/// `hasher`. Two coordinate sets with equal signatures lie in the same
/// smooth piece of the sampling function.
pub fn sample_signature<T: Scalar, H: Hasher>(
    coords: &Tensor<T>,
    h: usize,
    w: usize,
    mode: SamplePadding,
    hasher: &mut H,
) {
    let n = coords.len() / 2;
    let (rows, cols) = coords.data().split_at(n);
    for p in 0..n {
        let k = locate(rows[p].to_f64_lossy(), cols[p].to_f64_lossy(), h, w, mode);
        hasher.write_i64(k.r0 as i64);
        hasher.write_i64(k.c0 as i64);
        hasher.write_u8((k.dr > 0.0) as u8 | (((k.dc > 0.0) as u8) << 1));
    }
}

/// Source position and weight for one axis of a half-pixel resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    f: f64,
}

fn resize_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            Tap {
                i0,
                i1,
                f: s - i0 as f64,
            }
        })
        .collect()
}

/// Half-pixel bilinear resize of a (C,H,W) map to (C,oh,ow).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw("resize_bilinear")?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "resize_bilinear",
            format!("cannot resize {h}x{w} to {oh}x{ow}"),
        ));
    }
    let rt = resize_taps(h, oh);
    let ct = resize_taps(w, ow);
    let one = T::one();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.channel(ch);
        for r in &rt {
            let fr = T::lit(r.f);
            for k in &ct {
                let fc = T::lit(k.f);
                let top = (one - fc) * plane[r.i0 * w + k.i0] + fc * plane[r.i0 * w + k.i1];
                let bot = (one - fc) * plane[r.i1 * w + k.i0] + fc * plane[r.i1 * w + k.i1];
                out.push((one - fr) * top + fr * bot);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Adjoint of [`resize_bilinear`]: scatters `gy` (C,oh,ow) back onto (C,h,w).
pub fn resize_bilinear_backward<T: Scalar>(
    gy: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (c, oh, ow) = gy.chw("resize_bilinear_backward")?;
    let rt = resize_taps(h, oh);
    let ct = resize_taps(w, ow);
    let one = T::one();
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = gy.channel(ch);
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (i, r) in rt.iter().enumerate() {
            let fr = T::lit(r.f);
            for (j, k) in ct.iter().enumerate() {
                let fc = T::lit(k.f);
                let v = g[i * ow + j];
                dst[r.i0 * w + k.i0] += (one - fr) * (one - fc) * v;
                dst[r.i0 * w + k.i1] += (one - fr) * fc * v;
                dst[r.i1 * w + k.i0] += fr * (one - fc) * v;
                dst[r.i1 * w + k.i1] += fr * fc * v;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}

/// Integer-factor bilinear upsampling.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (_, h, w) = x.chw("upsample_bilinear")?;
    if factor == 0 {
        return Err(Error::invalid(
            "upsample_bilinear",
            "factor must be positive",
        ));
    }
    resize_bilinear(x, h * factor, w * factor)
}

/// Index of the nearest source cell for each destination cell.
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|d| (((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1))
        .collect()
}

/// 2x2 average pooling with stride 2 (even extents).
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "avg_pool2",
            format!("extent {h}x{w} is not even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = x.channel(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out.push((p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Scalar>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, oh, ow) = gy.chw("avg_pool2_backward")?;
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::lit(0.25);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = gy.channel(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[y * ow + xx] * quarter;
                let i = ch * h * w + 2 * y * w + 2 * xx;
                gx[i] = v;
                gx[i + 1] = v;
                gx[i + w] = v;
                gx[i + w + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(points: &[(f64, f64)]) -> Tensor<f64> {
        let mut data: Vec<f64> = points.iter().map(|p| p.0).collect();
        data.extend(points.iter().map(|p| p.1));
        Tensor::from_vec(&[2, 1, points.len()], data).unwrap()
    }

    #[test]
    fn integer_coordinates_gather_exactly() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64 * 1.25);
        let pts: Vec<(f64, f64)> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r as f64, c as f64)))
            .collect();
        let y = bilinear_sample(&x, &coords(&pts), SamplePadding::Clamp).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn half_pixel_on_two_by_two() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_sample(&x, &coords(&[(0.5, 0.5)]), SamplePadding::Clamp).unwrap();
        assert_eq!(y.data(), &[1.5]);
    }

    #[test]
    fn clamp_and_zero_padding_differ_outside() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![4.0, 4.0, 4.0, 4.0]).unwrap();
        let c = coords(&[(-1.0, 0.0), (0.0, 5.0)]);
        let clamp = bilinear_sample(&x, &c, SamplePadding::Clamp).unwrap();
        let zeros = bilinear_sample(&x, &c, SamplePadding::Zeros).unwrap();
        assert_eq!(clamp.data(), &[4.0, 4.0]);
        assert_eq!(zeros.data(), &[0.0, 0.0]);
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let x = Tensor::<f32>::full(&[2, 4, 8], 3.25);
        let y = resize_bilinear(&x, 16, 12).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-6));
        let z = Tensor::<f32>::from_fn(&[1, 3, 5], |i| i as f32);
        assert_eq!(resize_bilinear(&z, 3, 5).unwrap(), z);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4], |i| (i as f64).sin());
        let g = Tensor::<f64>::from_fn(&[1, 7, 5], |i| (i as f64 * 0.7).cos());
        let lhs = resize_bilinear(&x, 7, 5).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&resize_bilinear_backward(&g, 3, 4).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_indices_round_trip_for_integer_factors() {
        assert_eq!(nearest_indices(4, 8), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(nearest_indices(8, 4), vec![1, 3, 5, 7]);
    }
}
