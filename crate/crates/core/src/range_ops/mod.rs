//! Range-aware operators: proximity convolution, gated range-feature fusion
//! and range-guided depth-wise atrous separable convolution.

pub mod grid;
pub mod kernels;

use std::sync::Arc;

pub use grid::{build_proximity_grid, ProximityGrid};
pub use kernels::{
    proximity_conv, proximity_conv_backward, range_guided_gather, range_guided_gather_backward,
    tap_combine, tap_combine_backward, TAPS_3X3,
};

use crate::error::{Error, Result};
use crate::kernels::Conv2dConfig;
use crate::nn::{norm_act, Builder, Conv, ConvBlock, Norm};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore};

fn same_extent<T: Scalar>(op: &'static str, tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return Err(Error::shape(op, sa, sb));
    }
    Ok(())
}

/// Proximity convolution layer: weights `(C_out, C_in, kh, kw)` pair
/// row-major with the grid's sorted neighbours.
#[derive(Clone, Debug)]
pub struct ProximityConv {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl ProximityConv {
    pub fn new<T: Scalar>(
        bld: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        bias: bool,
    ) -> Self {
        let k = kernel.0 * kernel.1;
        ProximityConv {
            w: bld.he_uniform("w", &[cout, cin, kernel.0, kernel.1], cin * k),
            b: bias.then(|| bld.constant("b", &[cout], 0.0)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        grid: &Arc<ProximityGrid>,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.proximity_conv(x, Arc::clone(grid), w, b)
    }
}

/// Gated fusion of a pyramid level `P` with range features `R`:
/// `G = block2(block1(concat(P, R)))`, `w = sigmoid(conv1x1(G))`,
/// output `w * G + (1 - w) * P`.
#[derive(Clone, Debug)]
pub struct FeatureFusion {
    pub fuse1: ConvBlock,
    pub fuse2: ConvBlock,
    pub gate: Conv,
}

/// Intermediate values of one [`FeatureFusion`] pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub fused: Var,
    pub gate: Var,
    pub out: Var,
}

impl FeatureFusion {
    pub fn new<T: Scalar>(
        bld: &mut Builder<'_, T>,
        channels: usize,
        range_channels: usize,
    ) -> Self {
        FeatureFusion {
            fuse1: bld.scope("fuse1", |b| {
                ConvBlock::new(
                    b,
                    channels + range_channels,
                    channels,
                    3,
                    Conv2dConfig::default(),
                )
            }),
            fuse2: bld.scope("fuse2", |b| {
                ConvBlock::new(b, channels, channels, 3, Conv2dConfig::default())
            }),
            gate: bld.scope("gate", |b| {
                Conv::new(b, channels, channels, 1, Conv2dConfig::default(), true)
            }),
        }
    }

    pub fn forward_detailed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p: Var,
        r: Var,
    ) -> Result<FusionVars> {
        same_extent("feature_fusion", tape, p, r)?;
        let cat = tape.concat(&[p, r])?;
        let g1 = self.fuse1.forward(tape, store, cat)?;
        let fused = self.fuse2.forward(tape, store, g1)?;
        let z = self.gate.forward(tape, store, fused)?;
        let gate = tape.sigmoid(z);
        let a = tape.mul(gate, fused)?;
        let keep = tape.one_minus(gate);
        let b = tape.mul(keep, p)?;
        let out = tape.add(a, b)?;
        Ok(FusionVars { fused, gate, out })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p: Var,
        r: Var,
    ) -> Result<Var> {
        Ok(self.forward_detailed(tape, store, p, r)?.out)
    }
}

/// Range-guided depth-wise atrous separable convolution.
///
/// A 3x3 convolution over range features predicts one dilation rate per
/// pixel, `d(p) = d_max * sigmoid(z(p))`; the input is sampled bilinearly
/// (zero outside) at `p + d(p) * tap` for the nine canonical taps and the
/// samples are consumed by a depthwise 3x3 kernel and a pointwise 1x1.
#[derive(Clone, Debug)]
pub struct RangeGuidedConv {
    pub guide: Conv,
    pub d_max: f64,
    pub dw: ParamId,
    pub pw: ParamId,
}

impl RangeGuidedConv {
    pub fn new<T: Scalar>(
        bld: &mut Builder<'_, T>,
        cin: usize,
        range_channels: usize,
        cout: usize,
        d_max: f64,
    ) -> Self {
        RangeGuidedConv {
            guide: bld.scope("guide", |b| {
                Conv::new(b, range_channels, 1, 3, Conv2dConfig::default(), true)
            }),
            d_max,
            dw: bld.he_uniform("dw", &[cin, 1, 3, 3], 9),
            pw: bld.he_uniform("pw", &[cout, cin, 1, 1], cin),
        }
    }

    /// Per-pixel dilation rate `(1, H, W)`, bounded to `[0, d_max]`.
    pub fn guidance<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ren: Var,
    ) -> Result<Var> {
        let z = self.guide.forward(tape, store, ren)?;
        let s = tape.sigmoid(z);
        Ok(tape.scale(s, T::lit(self.d_max)))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        ren: Var,
    ) -> Result<Var> {
        same_extent("range_guided_dws_conv", tape, x, ren)?;
        let rate = self.guidance(tape, store, ren)?;
        let taps = tape.range_gather(x, rate)?;
        let dw = tape.param(store, self.dw);
        let mid = tape.tap_combine(taps, dw)?;
        let pw = tape.param(store, self.pw);
        tape.conv2d(mid, pw, None, Conv2dConfig::default())
    }
}

/// [`RangeGuidedConv`] followed by normalization and leaky ReLU.
#[derive(Clone, Debug)]
pub struct RangeGuidedBlock {
    pub conv: RangeGuidedConv,
    pub norm: Norm,
}

impl RangeGuidedBlock {
    pub fn new<T: Scalar>(
        bld: &mut Builder<'_, T>,
        cin: usize,
        range_channels: usize,
        cout: usize,
        d_max: f64,
    ) -> Self {
        RangeGuidedBlock {
            conv: bld.scope("rg", |b| {
                RangeGuidedConv::new(b, cin, range_channels, cout, d_max)
            }),
            norm: bld.scope("norm", |b| Norm::new(b, cout)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        ren: Var,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, store, x, ren)?;
        norm_act(&self.norm, tape, store, y)
    }
}
