//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-4, 1e-2]`.
    pub eps: f64,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
    /// Check at most this many randomly chosen input coordinates.
    pub max_coords: Option<usize>,
    /// Seed of the output cotangent and of coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` perturbation crossed a non-differentiable
    /// point (the tape signature changed) and were skipped.
    pub excluded: usize,
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `<build(inputs), v>` for a fixed random
/// cotangent `v` against central differences in every input coordinate.
pub fn grad_check<T, F>(
    inputs: &[Tensor<T>],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&opts.eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {} outside [1e-4, 1e-2]", opts.eps),
        ));
    }
    let run = |values: &[Tensor<T>]| -> Result<(Tape<T>, Var, Vec<Var>)> {
        let mut tape = Tape::with_signature();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        if !tape.value(out).all_finite() {
            return Err(Error::NonFinite { what: "grad_check" });
        }
        Ok((tape, out, vars))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut tape, out, vars) = run(inputs)?;
    let cot = Tensor::<T>::uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let base_sig = tape.signature();
    tape.backward(out, cot.clone())?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let coords: Vec<usize> = match opts.max_coords {
        Some(m) if m < total => {
            let mut picked = sample(&mut rng, total, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let eps = T::lit(opts.eps);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for flat in coords {
        let (mut t, mut j) = (0, flat);
        while j >= inputs[t].len() {
            j -= inputs[t].len();
            t += 1;
        }
        let x0 = inputs[t].data()[j];
        let mut eval = |v: T| -> Result<(f64, Option<u64>)> {
            probe[t].data_mut()[j] = v;
            let (tape, out, _) = run(&probe)?;
            Ok((tape.value(out).dot(&cot)?.to_f64_lossy(), tape.signature()))
        };
        let (plus, sig_plus) = eval(x0 + eps)?;
        let (minus, sig_minus) = eval(x0 - eps)?;
        probe[t].data_mut()[j] = x0;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[t].data()[j].to_f64_lossy();
        report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, opts.floor));
        report.checked += 1;
    }
    Ok(report)
}

/// [`grad_check`] over `inputs` followed by the values of `params`. The
/// parameters are bound to leaves, so `build` reads them through
/// [`Tape::param`] as usual.
pub fn grad_check_with_params<T, F>(
    store: &ParamStore<T>,
    params: &[ParamId],
    inputs: &[Tensor<T>],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|&id| store.get(id).value.clone()));
    let n = inputs.len();
    grad_check(
        &all,
        |tape, vars| {
            for (&id, &v) in params.iter().zip(&vars[n..]) {
                tape.bind(id, v);
            }
            build(tape, &vars[..n])
        },
        opts,
    )
}

/// Single-input convenience wrapper around [`grad_check`].
pub fn grad_check_unary<T, F>(x: &Tensor<T>, eps: f64, f: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..GradCheckOptions::default()
    };
    Ok(grad_check(std::slice::from_ref(x), |tape, v| f(tape, v[0]), &opts)?.max_rel_error)
}
