//! Parameterised building blocks recorded onto a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{Conv2dConfig, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Registers parameters under a dotted name prefix with seeded He-uniform
/// initialisation.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        };
        f(&mut inner)
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn he_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)));
        self.store.add(self.name(leaf), value)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f64) -> ParamId {
        self.store
            .add(self.name(leaf), Tensor::full(shape, T::lit(v)))
    }
}

/// Plain convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cfg: Conv2dConfig,
}

impl Conv {
    pub fn new<T: Scalar>(
        bld: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        cfg: Conv2dConfig,
        bias: bool,
    ) -> Self {
        let w = bld.he_uniform("w", &[cout, cin, k, k], cin * k * k);
        let b = bias.then(|| bld.constant("b", &[cout], 0.0));
        Conv { w, b, cfg }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.cfg)
    }
}

/// Per-channel normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, channels: usize) -> Self {
        Norm {
            gamma: bld.constant("gamma", &[channels], 1.0),
            beta: bld.constant("beta", &[channels], 0.0),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.norm(x, g, b)
    }
}

/// Normalization followed by leaky ReLU.
pub fn norm_act<T: Scalar>(
    norm: &Norm,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
) -> Result<Var> {
    let y = norm.forward(tape, store, x)?;
    Ok(tape.leaky_relu(y, T::lit(LEAKY_SLOPE)))
}

/// Bias-free convolution, normalization, leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        bld: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        cfg: Conv2dConfig,
    ) -> Self {
        ConvBlock {
            conv: bld.scope("conv", |b| Conv::new(b, cin, cout, k, cfg, false)),
            norm: bld.scope("norm", |b| Norm::new(b, cout)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        norm_act(&self.norm, tape, store, y)
    }
}

/// 3x3 depthwise separable convolution, normalization, leaky ReLU.
#[derive(Clone, Debug)]
pub struct SepBlock {
    pub dw: ParamId,
    pub pw: ParamId,
    pub dilation: (usize, usize),
    pub norm: Norm,
}

impl SepBlock {
    pub fn new<T: Scalar>(
        bld: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        dilation: (usize, usize),
    ) -> Self {
        SepBlock {
            dw: bld.he_uniform("dw", &[cin, 1, 3, 3], 9),
            pw: bld.he_uniform("pw", &[cout, cin, 1, 1], cin),
            dilation,
            norm: bld.scope("norm", |b| Norm::new(b, cout)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let dw = tape.param(store, self.dw);
        let pw = tape.param(store, self.pw);
        let y = tape.separable(x, dw, pw, self.dilation)?;
        norm_act(&self.norm, tape, store, y)
    }
}
