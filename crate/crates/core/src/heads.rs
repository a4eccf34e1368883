//! Toy-scale semantic pipeline: proximity-convolution stem, strided
//! encoder, range encoder (REN), 2-way FPN with range-aware fusion, and the
//! semantic head built from RDPC, RLSFE and the mismatch-correction (MC)
//! path.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Conv2dConfig;
use crate::nn::{norm_act, Builder, Conv, ConvBlock, Norm, SepBlock};
use crate::range_ops::{FeatureFusion, ProximityConv, ProximityGrid, RangeGuidedBlock};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::ParamStore;

/// Input extents must be multiples of this.
pub const STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    /// Proximity-convolution stem width.
    pub stem: usize,
    /// Encoder widths at x2, x4, x8, x16, x32.
    pub encoder: [usize; 5],
    pub ren: usize,
    pub pyramid: usize,
    /// Head branch width; RLSFE and the RDPC side branches use half.
    pub branch: usize,
    pub proximity_kernel: (usize, usize),
    pub rdpc_d_max: f64,
    pub rlsfe_d_max: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            input_channels: 5,
            num_classes: 5,
            stem: 16,
            encoder: [16, 16, 24, 32, 32],
            ren: 8,
            pyramid: 32,
            branch: 16,
            proximity_kernel: (3, 3),
            rdpc_d_max: 24.0,
            rlsfe_d_max: 3.0,
        }
    }
}

impl HeadConfig {
    /// A reduced configuration for finite-difference checks.
    pub fn tiny(num_classes: usize) -> Self {
        HeadConfig {
            num_classes,
            stem: 4,
            encoder: [4, 4, 4, 6, 6],
            ren: 2,
            pyramid: 4,
            branch: 4,
            ..HeadConfig::default()
        }
    }

    fn half(&self) -> usize {
        (self.branch / 2).max(1)
    }
}

fn check_extent(op: &'static str, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(STRIDE) || !w.is_multiple_of(STRIDE) {
        return Err(Error::invalid(
            op,
            format!("input extent {h}x{w} is not a positive multiple of {STRIDE}"),
        ));
    }
    Ok(())
}

fn levels_match<T: Scalar>(op: &'static str, tape: &Tape<T>, a: &[Var], b: &[Var]) -> Result<()> {
    if a.len() != 4 || b.len() != 4 {
        return Err(Error::invalid(
            op,
            format!("expected 4 levels, got {} and {}", a.len(), b.len()),
        ));
    }
    for (&x, &y) in a.iter().zip(b) {
        let (sx, sy) = (tape.value(x).shape(), tape.value(y).shape());
        if sx[1..] != sy[1..] {
            return Err(Error::shape(op, sx, sy));
        }
    }
    Ok(())
}

/// Proximity convolution, normalization, leaky ReLU.
#[derive(Clone, Debug)]
pub struct Pcm {
    pub conv: ProximityConv,
    pub norm: Norm,
}

impl Pcm {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, cfg: &HeadConfig) -> Self {
        Pcm {
            conv: bld.scope("conv", |b| {
                ProximityConv::new(b, cfg.input_channels, cfg.stem, cfg.proximity_kernel, false)
            }),
            norm: bld.scope("norm", |b| Norm::new(b, cfg.stem)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        grid: &Arc<ProximityGrid>,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, store, x, grid)?;
        norm_act(&self.norm, tape, store, y)
    }
}

/// Stride-2 conv blocks; returns the x4, x8, x16 and x32 features.
#[derive(Clone, Debug)]
pub struct StridedEncoder {
    pub stages: Vec<ConvBlock>,
}

impl StridedEncoder {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, cin: usize, widths: &[usize; 5]) -> Self {
        let mut prev = cin;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let block = bld.scope(&format!("stage{i}"), |b| {
                    ConvBlock::new(b, prev, w, 3, Conv2dConfig::strided(2))
                });
                prev = w;
                block
            })
            .collect();
        StridedEncoder { stages }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Vec<Var>> {
        let s = tape.value(x).shape().to_vec();
        check_extent("encoder", s[1], s[2])?;
        let mut h = x;
        let mut out = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(tape, store, h)?;
            if i > 0 {
                out.push(h);
            }
        }
        Ok(out)
    }
}

/// Top-down and bottom-up aggregation, summed per level and passed through
/// a 3x3 conv block.
#[derive(Clone, Debug)]
pub struct TwoWayFpn {
    pub top_down: Vec<Conv>,
    pub bottom_up: Vec<Conv>,
    pub output: Vec<ConvBlock>,
}

impl TwoWayFpn {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, widths: &[usize], channels: usize) -> Self {
        let lateral = |bld: &mut Builder<'_, T>, name: &str| -> Vec<Conv> {
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    bld.scope(&format!("{name}{i}"), |b| {
                        Conv::new(b, w, channels, 1, Conv2dConfig::default(), true)
                    })
                })
                .collect()
        };
        let top_down = lateral(bld, "td");
        let bottom_up = lateral(bld, "bu");
        let output = (0..widths.len())
            .map(|i| {
                bld.scope(&format!("out{i}"), |b| {
                    ConvBlock::new(b, channels, channels, 3, Conv2dConfig::default())
                })
            })
            .collect();
        TwoWayFpn {
            top_down,
            bottom_up,
            output,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        levels: &[Var],
    ) -> Result<Vec<Var>> {
        if levels.len() != self.output.len() {
            return Err(Error::invalid(
                "two_way_fpn",
                format!(
                    "expected {} levels, got {}",
                    self.output.len(),
                    levels.len()
                ),
            ));
        }
        let n = levels.len();
        let mut td: Vec<Option<Var>> = vec![None; n];
        for i in (0..n).rev() {
            let lat = self.top_down[i].forward(tape, store, levels[i])?;
            td[i] = Some(match td.get(i + 1).copied().flatten() {
                Some(coarse) => {
                    let up = tape.upsample(coarse, 2)?;
                    tape.add(lat, up)?
                }
                None => lat,
            });
        }
        let mut out = Vec::with_capacity(n);
        let mut bu: Option<Var> = None;
        for i in 0..n {
            let lat = self.bottom_up[i].forward(tape, store, levels[i])?;
            let b = match bu {
                Some(fine) => {
                    let down = tape.avg_pool2(fine)?;
                    tape.add(lat, down)?
                }
                None => lat,
            };
            bu = Some(b);
            let sum = tape.add(td[i].expect("top-down level"), b)?;
            out.push(self.output[i].forward(tape, store, sum)?);
        }
        Ok(out)
    }
}

/// Per-level feature fusion of FPN outputs with REN features.
#[derive(Clone, Debug)]
pub struct RangeAwareFpn {
    pub fusion: Vec<FeatureFusion>,
}

impl RangeAwareFpn {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, channels: usize, ren: usize) -> Self {
        RangeAwareFpn {
            fusion: (0..4)
                .map(|i| {
                    bld.scope(&format!("fusion{i}"), |b| {
                        FeatureFusion::new(b, channels, ren)
                    })
                })
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        p: &[Var],
        r: &[Var],
    ) -> Result<Vec<Var>> {
        levels_match("range_aware_fpn", tape, p, r)?;
        self.fusion
            .iter()
            .zip(p.iter().zip(r))
            .map(|(f, (&p, &r))| f.forward(tape, store, p, r))
            .collect()
    }
}

/// Range-guided dense prediction cell.
#[derive(Clone, Debug)]
pub struct Rdpc {
    pub a: SepBlock,
    pub b: RangeGuidedBlock,
    pub a1: SepBlock,
    pub a2: SepBlock,
    pub a3: SepBlock,
    pub a3b: SepBlock,
    pub fifth: RangeGuidedBlock,
    pub project: Conv,
}

impl Rdpc {
    pub const BRANCHES: usize = 6;

    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, cfg: &HeadConfig) -> Self {
        let (c, w, h, rc) = (cfg.pyramid, cfg.branch, cfg.half(), cfg.ren);
        Rdpc {
            a: bld.scope("a", |b| SepBlock::new(b, c, w, (1, 6))),
            b: bld.scope("b", |b| RangeGuidedBlock::new(b, c, rc, h, cfg.rdpc_d_max)),
            a1: bld.scope("a1", |b| SepBlock::new(b, w, w, (1, 1))),
            a2: bld.scope("a2", |b| SepBlock::new(b, w, w, (6, 21))),
            a3: bld.scope("a3", |b| SepBlock::new(b, w, w, (18, 15))),
            a3b: bld.scope("a3b", |b| SepBlock::new(b, w, w, (6, 3))),
            fifth: bld.scope("fifth", |b| {
                RangeGuidedBlock::new(b, w, rc, w - h, cfg.rdpc_d_max)
            }),
            project: bld.scope("project", |b| {
                Conv::new(b, Self::BRANCHES * w, w, 1, Conv2dConfig::default(), true)
            }),
        }
    }

    /// Width of the concatenated branch tensor.
    pub fn concat_width(cfg: &HeadConfig) -> usize {
        Self::BRANCHES * cfg.branch
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        r: Var,
    ) -> Result<Var> {
        let (sx, sr) = (tape.value(x).shape(), tape.value(r).shape());
        if sx[1..] != sr[1..] {
            return Err(Error::shape("rdpc", sx, sr));
        }
        let a = self.a.forward(tape, store, x)?;
        let b = self.b.forward(tape, store, x, r)?;
        let a1 = self.a1.forward(tape, store, a)?;
        let a2 = self.a2.forward(tape, store, a)?;
        let a3 = self.a3.forward(tape, store, a)?;
        let a3b = self.a3b.forward(tape, store, a3)?;
        let f = self.fifth.forward(tape, store, a, r)?;
        let fifth = tape.concat(&[f, b])?;
        let cat = tape.concat(&[a1, a2, a3, a3b, a, fifth])?;
        self.project.forward(tape, store, cat)
    }
}

/// Range-guided large-scale feature extractor.
#[derive(Clone, Debug)]
pub struct Rlsfe {
    pub rg: RangeGuidedBlock,
    pub sep1: SepBlock,
    pub sep2: SepBlock,
}

impl Rlsfe {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, cfg: &HeadConfig) -> Self {
        let (w, h) = (cfg.branch, cfg.half());
        Rlsfe {
            rg: bld.scope("rg", |b| {
                RangeGuidedBlock::new(b, cfg.pyramid, cfg.ren, w, cfg.rlsfe_d_max)
            }),
            sep1: bld.scope("sep1", |b| SepBlock::new(b, w, h, (1, 1))),
            sep2: bld.scope("sep2", |b| SepBlock::new(b, h, h, (1, 1))),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        r: Var,
    ) -> Result<Var> {
        let y = self.rg.forward(tape, store, x, r)?;
        let y = self.sep1.forward(tape, store, y)?;
        self.sep2.forward(tape, store, y)
    }
}

/// Two separable conv blocks followed by x2 bilinear upsampling.
#[derive(Clone, Debug)]
pub struct Mc {
    pub sep1: SepBlock,
    pub sep2: SepBlock,
}

impl Mc {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, cin: usize, cout: usize) -> Self {
        Mc {
            sep1: bld.scope("sep1", |b| SepBlock::new(b, cin, cout, (1, 1))),
            sep2: bld.scope("sep2", |b| SepBlock::new(b, cout, cout, (1, 1))),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.sep1.forward(tape, store, x)?;
        let y = self.sep2.forward(tape, store, y)?;
        tape.upsample(y, 2)
    }
}

/// RDPC at x32 and x16, RLSFE at x8 and x4, MC top-down path with a
/// bottom-up augmentation, then a 1x1 classifier and x4 upsampling.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    pub rdpc32: Rdpc,
    pub rdpc16: Rdpc,
    pub rlsfe8: Rlsfe,
    pub rlsfe4: Rlsfe,
    pub mc32: Mc,
    pub mc16: Mc,
    pub mc8: Mc,
    pub classifier: Conv,
}

impl SemanticHead {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, cfg: &HeadConfig) -> Self {
        let (w, h) = (cfg.branch, cfg.half());
        SemanticHead {
            rdpc32: bld.scope("rdpc32", |b| Rdpc::new(b, cfg)),
            rdpc16: bld.scope("rdpc16", |b| Rdpc::new(b, cfg)),
            rlsfe8: bld.scope("rlsfe8", |b| Rlsfe::new(b, cfg)),
            rlsfe4: bld.scope("rlsfe4", |b| Rlsfe::new(b, cfg)),
            mc32: bld.scope("mc32", |b| Mc::new(b, w, w)),
            mc16: bld.scope("mc16", |b| Mc::new(b, w, h)),
            mc8: bld.scope("mc8", |b| Mc::new(b, h, h)),
            classifier: bld.scope("classifier", |b| {
                Conv::new(
                    b,
                    2 * w + 2 * h,
                    cfg.num_classes,
                    1,
                    Conv2dConfig::default(),
                    true,
                )
            }),
        }
    }

    /// `pyramid` and `ren` ordered x4, x8, x16, x32.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pyramid: &[Var],
        ren: &[Var],
    ) -> Result<Var> {
        levels_match("semantic_head", tape, pyramid, ren)?;
        let d32 = self.rdpc32.forward(tape, store, pyramid[3], ren[3])?;
        let d16 = self.rdpc16.forward(tape, store, pyramid[2], ren[2])?;
        let l8 = self.rlsfe8.forward(tape, store, pyramid[1], ren[1])?;
        let l4 = self.rlsfe4.forward(tape, store, pyramid[0], ren[0])?;

        let m = self.mc32.forward(tape, store, d32)?;
        let u16 = tape.add(d16, m)?;
        let m = self.mc16.forward(tape, store, u16)?;
        let u8 = tape.add(l8, m)?;
        let m = self.mc8.forward(tape, store, u8)?;
        let u4 = tape.add(l4, m)?;
        let down = tape.avg_pool2(u4)?;
        let v8 = tape.add(u8, down)?;

        let s32 = tape.upsample(d32, 8)?;
        let s16 = tape.upsample(u16, 4)?;
        let s8 = tape.upsample(v8, 2)?;
        let cat = tape.concat(&[s32, s16, s8, u4])?;
        let logits = self.classifier.forward(tape, store, cat)?;
        tape.upsample(logits, 4)
    }
}

/// The complete semantic pipeline from a 5-channel range image to
/// per-pixel class logits at input resolution.
#[derive(Clone, Debug)]
pub struct SemanticNet {
    pub cfg: HeadConfig,
    pub pcm: Pcm,
    pub encoder: StridedEncoder,
    pub ren: StridedEncoder,
    pub fpn: TwoWayFpn,
    pub range_fpn: RangeAwareFpn,
    pub head: SemanticHead,
}

/// Intermediate values of a [`SemanticNet`] pass.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub encoder: Vec<Var>,
    pub ren: Vec<Var>,
    pub fpn: Vec<Var>,
    pub pyramid: Vec<Var>,
    pub logits: Var,
}

impl SemanticNet {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, cfg: HeadConfig) -> Self {
        let ren_widths = [cfg.ren; 5];
        SemanticNet {
            pcm: bld.scope("pcm", |b| Pcm::new(b, &cfg)),
            encoder: bld.scope("encoder", |b| {
                StridedEncoder::new(b, cfg.stem, &cfg.encoder)
            }),
            ren: bld.scope("ren", |b| StridedEncoder::new(b, 1, &ren_widths)),
            fpn: bld.scope("fpn", |b| TwoWayFpn::new(b, &cfg.encoder[1..], cfg.pyramid)),
            range_fpn: bld.scope("range_fpn", |b| RangeAwareFpn::new(b, cfg.pyramid, cfg.ren)),
            head: bld.scope("head", |b| SemanticHead::new(b, &cfg)),
            cfg,
        }
    }

    /// `x` is the `(5, H, W)` image, `range` its `(1, H, W)` range channel.
    pub fn forward_detailed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        range: Var,
        grid: &Arc<ProximityGrid>,
    ) -> Result<NetVars> {
        let s = tape.value(x).shape().to_vec();
        check_extent("semantic_net", s[1], s[2])?;
        let stem = self.pcm.forward(tape, store, x, grid)?;
        let encoder = self.encoder.forward(tape, store, stem)?;
        let ren = self.ren.forward(tape, store, range)?;
        let fpn = self.fpn.forward(tape, store, &encoder)?;
        let pyramid = self.range_fpn.forward(tape, store, &fpn, &ren)?;
        let logits = self.head.forward(tape, store, &pyramid, &ren)?;
        Ok(NetVars {
            encoder,
            ren,
            fpn,
            pyramid,
            logits,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        range: Var,
        grid: &Arc<ProximityGrid>,
    ) -> Result<Var> {
        Ok(self.forward_detailed(tape, store, x, range, grid)?.logits)
    }
}
