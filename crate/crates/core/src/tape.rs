//! Reverse-mode differentiation over the kernels in [`crate::kernels`] and
//! [`crate::range_ops`].
//!
//! A [`Tape`] records every forward value. [`Tape::backward`] walks the
//! record in reverse and calls each operator's analytic backward kernel.
//! Parameter gradients are added into [`crate::tensor::Param::grad`] only by
//! [`Tape::accumulate_param_grads`]; nothing is zeroed implicitly.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dConfig, NormCache, SamplePadding};
use crate::range_ops::grid::ProximityGrid;
use crate::range_ops::kernels as rk;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dConfig,
    },
    Depthwise {
        x: Var,
        w: Var,
        cfg: Conv2dConfig,
    },
    Proximity {
        x: Var,
        w: Var,
        b: Option<Var>,
        grid: Arc<ProximityGrid>,
    },
    Bilinear {
        x: Var,
        coords: Var,
        mode: SamplePadding,
    },
    RangeGather {
        x: Var,
        rate: Var,
    },
    TapCombine {
        g: Var,
        w: Var,
    },
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Resize {
        x: Var,
        from: (usize, usize),
    },
    AvgPool2(Var),
    Concat(Vec<(Var, usize)>),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Sum(Var),
    FuseLogits(Var, Var),
    /// Scalar whose gradient with respect to `x` was computed during the
    /// forward pass (losses with data-dependent structure).
    ScalarWithGrad {
        x: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation graph with its forward values.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    signature: Option<DefaultHasher>,
    bindings: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            signature: None,
            bindings: HashMap::new(),
        }
    }

    /// A tape that fingerprints the active piece of every piecewise-smooth
    /// operator (leaky-ReLU signs, bilinear cells, sort orders). Two forward
    /// passes with equal [`Tape::signature`] lie on the same smooth piece.
    pub fn with_signature() -> Self {
        Tape {
            signature: Some(DefaultHasher::new()),
            ..Self::new()
        }
    }

    pub fn signature(&self) -> Option<u64> {
        self.signature.as_ref().map(Hasher::finish)
    }

    pub(crate) fn tracks_signature(&self) -> bool {
        self.signature.is_some()
    }

    pub(crate) fn note(&mut self, f: impl FnOnce(&mut DefaultHasher)) {
        if let Some(h) = self.signature.as_mut() {
            f(h);
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` if nothing flowed to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of a parameter, or returns the variable
    /// bound to it with [`Tape::bind`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    /// Makes every later [`Tape::param`] lookup of `id` return `v`, so a
    /// parameter can be fed from a leaf (finite-difference checks).
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bindings.insert(id, v);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &cfg)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, cfg }))
    }

    pub fn depthwise(&mut self, x: Var, w: Var, cfg: Conv2dConfig) -> Result<Var> {
        let y = kernels::depthwise_conv2d(self.value(x), self.value(w), &cfg)?;
        Ok(self.push(y, Op::Depthwise { x, w, cfg }))
    }

    /// Depthwise conv (`dw`, dilated) followed by a 1x1 pointwise conv (`pw`).
    pub fn separable(&mut self, x: Var, dw: Var, pw: Var, dilation: (usize, usize)) -> Result<Var> {
        let mid = self.depthwise(x, dw, Conv2dConfig::dilated(dilation.0, dilation.1))?;
        self.conv2d(mid, pw, None, Conv2dConfig::default())
    }

    pub fn proximity_conv(
        &mut self,
        x: Var,
        grid: Arc<ProximityGrid>,
        w: Var,
        b: Option<Var>,
    ) -> Result<Var> {
        let y = rk::proximity_conv(
            self.value(x),
            &grid,
            self.value(w),
            b.map(|b| self.value(b)),
        )?;
        Ok(self.push(y, Op::Proximity { x, w, b, grid }))
    }

    pub fn bilinear_sample(&mut self, x: Var, coords: Var, mode: SamplePadding) -> Result<Var> {
        let y = kernels::bilinear_sample(self.value(x), self.value(coords), mode)?;
        if self.tracks_signature() {
            let (h, w) = (self.value(x).shape()[1], self.value(x).shape()[2]);
            let c = self.value(coords).clone();
            self.note(|s| kernels::sample_signature(&c, h, w, mode, s));
        }
        Ok(self.push(y, Op::Bilinear { x, coords, mode }))
    }

    /// Nine-tap gather at `p + rate(p) * tap`, see [`rk::range_guided_gather`].
    pub fn range_gather(&mut self, x: Var, rate: Var) -> Result<Var> {
        let y = rk::range_guided_gather(self.value(x), self.value(rate))?;
        if self.tracks_signature() {
            let (h, w) = (self.value(x).shape()[1], self.value(x).shape()[2]);
            let d = self.value(rate).clone();
            self.note(|s| {
                for &tap in &rk::TAPS_3X3 {
                    kernels::sample_signature(
                        &rk::tap_coords(&d, tap),
                        h,
                        w,
                        SamplePadding::Zeros,
                        s,
                    );
                }
            });
        }
        Ok(self.push(y, Op::RangeGather { x, rate }))
    }

    pub fn tap_combine(&mut self, g: Var, w: Var) -> Result<Var> {
        let y = rk::tap_combine(self.value(g), self.value(w))?;
        Ok(self.push(y, Op::TapCombine { g, w }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let xv = self.value(x);
        let y = kernels::leaky_relu(xv, slope);
        if self.tracks_signature() {
            let bits: Vec<u8> = xv.data().iter().map(|&v| (v > T::zero()) as u8).collect();
            self.note(|s| s.write(&bits));
        }
        self.push(y, Op::LeakyRelu(x, slope))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_channelwise(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale(x, s))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() - v);
        self.push(y, Op::OneMinus(x))
    }

    /// Half-pixel bilinear resize to `(h, w)`.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (_, fh, fw) = self.value(x).chw("resize")?;
        let y = kernels::resize_bilinear(self.value(x), h, w)?;
        Ok(self.push(y, Op::Resize { x, from: (fh, fw) }))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).chw("upsample")?;
        self.resize(x, h * factor, w * factor)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool2(x)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&values)?;
        let parts = parts
            .iter()
            .map(|&v| (v, self.value(v).shape()[0]))
            .collect();
        Ok(self.push(y, Op::Concat(parts)))
    }

    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, cache) = kernels::channel_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    /// `(sigmoid(a) + sigmoid(b)) * (a + b)`, elementwise.
    pub fn fuse_logits(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = crate::fusion::fuse_logits(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::FuseLogits(a, b)))
    }

    /// Records a scalar `value` of `x` whose gradient `grad` is already known.
    pub fn scalar_with_grad(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape(
                "scalar_with_grad",
                self.value(x).shape(),
                grad.shape(),
            ));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad { x, grad }))
    }

    /// Backpropagates `seed` (same shape as `out`) through the recorded graph.
    pub fn backward(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape(
                "backward",
                self.value(out).shape(),
                seed.shape(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: &Var| &self.nodes[v.0].value;
            let mut push = |v: Var, t: Tensor<T>| -> Result<()> {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, cfg } => {
                    let gr = kernels::conv2d_backward(val(x), val(w), cfg, &g)?;
                    push(*x, gr.x)?;
                    push(*w, gr.w)?;
                    if let Some(b) = b {
                        push(*b, gr.b)?;
                    }
                }
                Op::Depthwise { x, w, cfg } => {
                    let (gx, gw) = kernels::depthwise_conv2d_backward(val(x), val(w), cfg, &g)?;
                    push(*x, gx)?;
                    push(*w, gw)?;
                }
                Op::Proximity { x, w, b, grid } => {
                    let (gx, gw, gb) = rk::proximity_conv_backward(val(x), grid, val(w), &g)?;
                    push(*x, gx)?;
                    push(*w, gw)?;
                    if let Some(b) = b {
                        push(*b, gb)?;
                    }
                }
                Op::Bilinear { x, coords, mode } => {
                    let (gx, gc) =
                        kernels::bilinear_sample_backward(val(x), val(coords), *mode, &g)?;
                    push(*x, gx)?;
                    push(*coords, gc)?;
                }
                Op::RangeGather { x, rate } => {
                    let (gx, gd) = rk::range_guided_gather_backward(val(x), val(rate), &g)?;
                    push(*x, gx)?;
                    push(*rate, gd)?;
                }
                Op::TapCombine { g: taps, w } => {
                    let (gg, gw) = rk::tap_combine_backward(val(taps), val(w), &g)?;
                    push(*taps, gg)?;
                    push(*w, gw)?;
                }
                Op::Sigmoid(x) => push(*x, kernels::sigmoid_backward(&node.value, &g)?)?,
                Op::LeakyRelu(x, slope) => {
                    push(*x, kernels::leaky_relu_backward(val(x), *slope, &g)?)?
                }
                Op::Softmax(x) => {
                    push(*x, kernels::softmax_channelwise_backward(&node.value, &g)?)?
                }
                Op::Add(a, b) => {
                    push(*a, g.clone())?;
                    push(*b, g)?;
                }
                Op::Sub(a, b) => {
                    push(*b, g.map(|v| -v))?;
                    push(*a, g)?;
                }
                Op::Mul(a, b) => {
                    push(*a, kernels::hadamard(&g, val(b))?)?;
                    push(*b, kernels::hadamard(&g, val(a))?)?;
                }
                Op::Scale(x, s) => push(*x, g.map(|v| v * *s))?,
                Op::OneMinus(x) => push(*x, g.map(|v| -v))?,
                Op::Resize { x, from } => {
                    push(*x, kernels::resize_bilinear_backward(&g, from.0, from.1)?)?
                }
                Op::AvgPool2(x) => push(*x, kernels::avg_pool2_backward(&g)?)?,
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| p.1).collect();
                    for ((v, _), gp) in parts.iter().zip(kernels::split_channels(&g, &widths)?) {
                        push(*v, gp)?;
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (gx, gg, gb) = kernels::channel_norm_backward(cache, val(gamma), &g)?;
                    push(*x, gx)?;
                    push(*gamma, gg)?;
                    push(*beta, gb)?;
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    push(*x, Tensor::full(val(x).shape(), s))?;
                }
                Op::FuseLogits(a, b) => {
                    let (ga, gb) = crate::fusion::fuse_logits_backward(val(a), val(b), &g)?;
                    push(*a, ga)?;
                    push(*b, gb)?;
                }
                Op::ScalarWithGrad { x, grad } => {
                    let s = g.data()[0];
                    push(*x, grad.map(|v| v * s))?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every recorded parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, self.grads.get(i).and_then(Option::as_ref))
            {
                store.get_mut(*id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}
