//! Semantic loss: per-pixel log-loss plus the multiclass Lovász-Softmax.

use std::hash::Hash;

use crate::error::{Error, Result};
use crate::io::ClassMap;
use crate::kernels::softmax_channelwise;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Logit channel of every pixel's target, `None` for ignored pixels.
pub fn target_channels(target: &[u32], map: &ClassMap) -> Vec<Option<usize>> {
    target
        .iter()
        .map(|&t| {
            if t == map.ignore_id() {
                None
            } else {
                map.channel_of(t)
            }
        })
        .collect()
}

fn check(op: &'static str, shape: &[usize], target: &[Option<usize>]) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[1] * shape[2] != target.len() {
        return Err(Error::shape(op, &[0, target.len()], shape));
    }
    let (c, n) = (shape[0], shape[1] * shape[2]);
    if let Some(bad) = target.iter().flatten().find(|&&t| t >= c) {
        return Err(Error::invalid(
            op,
            format!("target channel {bad} out of {c}"),
        ));
    }
    if target.iter().all(Option::is_none) {
        return Err(Error::AllIgnored);
    }
    Ok((c, n))
}

/// Mean negative log-softmax of the target over non-ignored pixels, with
/// its gradient with respect to the logits.
pub fn nll<T: Scalar>(logits: &Tensor<T>, target: &[Option<usize>]) -> Result<(T, Tensor<T>)> {
    let (c, n) = check("nll", logits.shape(), target)?;
    let probs = softmax_channelwise(logits)?;
    let count = target.iter().flatten().count();
    let inv = T::one() / T::lit(count as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let x = logits.data();
    for (p, t) in target.iter().enumerate() {
        let Some(t) = *t else { continue };
        let max = (0..c).map(|k| x[k * n + p]).fold(T::neg_infinity(), T::max);
        let lse = max
            + (0..c)
                .map(|k| (x[k * n + p] - max).exp())
                .fold(T::zero(), |a, b| a + b)
                .ln();
        total += lse - x[t * n + p];
        for k in 0..c {
            let onehot = if k == t { T::one() } else { T::zero() };
            grad.data_mut()[k * n + p] = (probs.data()[k * n + p] - onehot) * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Lovász extension of the Jaccard loss for one class: `errors` and
/// foreground flags per pixel. Returns the value and the weight each
/// error receives (its gradient).
pub fn lovasz_class<T: Scalar>(errors: &[T], fg: &[bool]) -> (T, Vec<T>, Vec<usize>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| {
        errors[b]
            .partial_cmp(&errors[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let mut weights = vec![T::zero(); errors.len()];
    let (mut cum_fg, mut prev_jaccard, mut value) = (0.0, 0.0, T::zero());
    for (i, &p) in order.iter().enumerate() {
        if fg[p] {
            cum_fg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + (i + 1) as f64 - cum_fg;
        let jaccard = 1.0 - intersection / union;
        let w = T::lit(jaccard - prev_jaccard);
        weights[p] = w;
        value += w * errors[p];
        prev_jaccard = jaccard;
    }
    (value, weights, order)
}

/// Multiclass Lovász-Softmax over the probabilities of non-ignored pixels,
/// averaged over the classes present in the target. Also returns the
/// gradient with respect to `probs` and a fingerprint of the sort orders.
pub fn lovasz_softmax<T: Scalar>(
    probs: &Tensor<T>,
    target: &[Option<usize>],
) -> Result<(T, Tensor<T>, Vec<Vec<usize>>)> {
    let (c, n) = check("lovasz_softmax", probs.shape(), target)?;
    let pixels: Vec<(usize, usize)> = target
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|t| (p, t)))
        .collect();
    let present: Vec<usize> = (0..c)
        .filter(|&k| pixels.iter().any(|&(_, t)| t == k))
        .collect();
    let inv = T::one() / T::lit(present.len() as f64);
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = T::zero();
    let mut orders = Vec::with_capacity(present.len());
    for &k in &present {
        let fg: Vec<bool> = pixels.iter().map(|&(_, t)| t == k).collect();
        let errors: Vec<T> = pixels
            .iter()
            .zip(&fg)
            .map(|(&(p, _), &f)| {
                let pr = probs.data()[k * n + p];
                if f {
                    T::one() - pr
                } else {
                    pr
                }
            })
            .collect();
        let (value, weights, order) = lovasz_class(&errors, &fg);
        total += value * inv;
        for (j, &(p, _)) in pixels.iter().enumerate() {
            let sign = if fg[j] { -T::one() } else { T::one() };
            grad.data_mut()[k * n + p] = sign * weights[j] * inv;
        }
        orders.push(order);
    }
    Ok((total, grad, orders))
}

/// Lovász-Softmax of `probs` recorded on the tape.
pub fn lovasz_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &[Option<usize>],
) -> Result<Var> {
    let (value, grad, orders) = lovasz_softmax(tape.value(probs), target)?;
    tape.note(|h| orders.hash(h));
    tape.scalar_with_grad(probs, value, grad)
}

/// `L_pp + L_LS` recorded on the tape. `target` holds learning ids.
pub fn semantic_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &[u32],
    map: &ClassMap,
) -> Result<Var> {
    let channels = target_channels(target, map);
    semantic_loss_channels(tape, logits, &channels)
}

pub fn semantic_loss_channels<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &[Option<usize>],
) -> Result<Var> {
    let (value, grad) = nll(tape.value(logits), target)?;
    let pp = tape.scalar_with_grad(logits, value, grad)?;
    let probs = tape.softmax(logits)?;
    let ls = lovasz_on_tape(tape, probs, target)?;
    tape.add(pp, ls)
}

/// Loss value without recording gradients.
pub fn semantic_loss_value<T: Scalar>(
    logits: &Tensor<T>,
    target: &[u32],
    map: &ClassMap,
) -> Result<f64> {
    let channels = target_channels(target, map);
    let (pp, _) = nll(logits, &channels)?;
    let (ls, _, _) = lovasz_softmax(&softmax_channelwise(logits)?, &channels)?;
    Ok((pp + ls).to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Jaccard set loss of a mispredicted set `m` given foreground `fg`.
    fn jaccard_loss(m: &[bool], fg: &[bool]) -> f64 {
        let miss = m.iter().filter(|&&b| b).count() as f64;
        let union = m.iter().zip(fg).filter(|(&a, &b)| a || b).count() as f64;
        if union == 0.0 {
            0.0
        } else {
            miss / union
        }
    }

    /// Level-set integral of the Jaccard set loss: the Lovász extension
    /// evaluated without sorting.
    fn lovasz_oracle(errors: &[f64], fg: &[bool]) -> f64 {
        let mut levels: Vec<f64> = errors.to_vec();
        levels.push(0.0);
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut total = 0.0;
        for pair in levels.windows(2) {
            let set: Vec<bool> = errors.iter().map(|&e| e >= pair[1]).collect();
            total += (pair[1] - pair[0]) * jaccard_loss(&set, fg);
        }
        total
    }

    #[test]
    fn two_pixel_binary_lovasz() {
        for (errors, fg) in [
            ([0.3, 0.8], [true, false]),
            ([0.6, 0.1], [true, true]),
            ([0.5, 0.5], [false, true]),
        ] {
            let (v, _, _) = lovasz_class(&errors, &fg);
            assert!(
                (v - lovasz_oracle(&errors, &fg)).abs() < 1e-12,
                "{errors:?} {fg:?}"
            );
        }
    }

    #[test]
    fn lovasz_matches_oracle_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..9);
            let errors: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let fg: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let (v, _, _) = lovasz_class(&errors, &fg);
            assert!((v - lovasz_oracle(&errors, &fg)).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::<f64>::zeros(&[5, 2, 3]);
        let target: Vec<Option<usize>> = (0..6).map(|i| Some(i % 5)).collect();
        let (v, _) = nll(&logits, &target).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits_vanish() {
        let map = ClassMap::preset("synthetic").unwrap();
        let target: Vec<u32> = vec![1, 2, 3, 4, 5, 0];
        let logits = Tensor::<f32>::from_fn(&[5, 1, 6], |i| {
            let (ch, p) = (i / 6, i % 6);
            if map.channel_of(target[p]) == Some(ch) {
                20.0
            } else {
                -20.0
            }
        });
        assert!(semantic_loss_value(&logits, &target, &map).unwrap() < 1e-4);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let map = ClassMap::preset("synthetic").unwrap();
        let logits = Tensor::<f32>::zeros(&[5, 1, 2]);
        assert!(matches!(
            semantic_loss_value(&logits, &[0, 0], &map),
            Err(Error::AllIgnored)
        ));
    }
}
