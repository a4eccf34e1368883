//! Finite-difference gradient checks of every differentiable operator,
//! each run over freshly seeded inputs and parameters.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_with_params, GradCheckOptions, GradCheckReport};
use crate::heads::{HeadConfig, Rdpc, Rlsfe, SemanticHead};
use crate::kernels::{Conv2dConfig, SamplePadding};
use crate::loss::lovasz_on_tape;
use crate::nn::Builder;
use crate::range_ops::{build_proximity_grid, FeatureFusion, RangeGuidedConv};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const OPERATORS: [&str; 11] = [
    "conv2d",
    "depthwise_separable",
    "bilinear_sample",
    "proximity_conv",
    "feature_fusion",
    "range_guided_dws_conv",
    "rdpc",
    "rlsfe",
    "semantic_head",
    "fuse_logits",
    "lovasz",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub tolerance: f64,
    /// Coordinates sampled per seed (inputs and parameters together).
    pub max_coords: usize,
    pub eps: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: 20,
            tolerance: 1e-3,
            max_coords: 48,
            eps: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub seconds: f64,
    pub passed: bool,
}

fn module<M>(
    rng: &mut ChaCha8Rng,
    make: impl FnOnce(&mut Builder<'_, f64>) -> M,
) -> (ParamStore<f64>, Vec<ParamId>, M) {
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
    let m = make(&mut Builder::new(&mut store, &mut init));
    let ids = store.iter().map(|(id, _)| id).collect();
    (store, ids, m)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

fn range_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f32>, Vec<bool>) {
    let range = (0..h * w).map(|_| rng.gen_range(2.0..30.0)).collect();
    let valid = (0..h * w).map(|_| rng.gen_bool(0.9)).collect();
    (range, valid)
}

/// Runs one seeded check of operator `name`.
pub fn check_operator(name: &str, seed: u64, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let index = OPERATORS
        .iter()
        .position(|&o| o == name)
        .ok_or_else(|| Error::invalid("gradcheck", format!("unknown operator {name:?}")))?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let opts = GradCheckOptions {
        eps: cfg.eps,
        max_coords: Some(cfg.max_coords),
        seed: rng.gen(),
        ..GradCheckOptions::default()
    };
    match name {
        "conv2d" => {
            let conv = [
                Conv2dConfig::default(),
                Conv2dConfig::strided(2),
                Conv2dConfig::dilated(2, 1),
            ][rng.gen_range(0..3)];
            let inputs = [
                uniform(&mut rng, &[3, 7, 8], -1.0, 1.0),
                uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[4], -1.0, 1.0),
            ];
            grad_check(
                &inputs,
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), conv),
                &opts,
            )
        }
        "depthwise_separable" => {
            let dilation = [(1, 1), (2, 3), (3, 1)][rng.gen_range(0..3)];
            let inputs = [
                uniform(&mut rng, &[3, 7, 8], -1.0, 1.0),
                uniform(&mut rng, &[3, 1, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[4, 3, 1, 1], -1.0, 1.0),
            ];
            grad_check(
                &inputs,
                |t, v| t.separable(v[0], v[1], v[2], dilation),
                &opts,
            )
        }
        "bilinear_sample" => {
            let mode = if rng.gen_bool(0.5) {
                SamplePadding::Zeros
            } else {
                SamplePadding::Clamp
            };
            let (h, w) = (6, 7);
            let x = uniform(&mut rng, &[2, h, w], -1.0, 1.0);
            let coords = Tensor::from_fn(&[2, 4, 5], |i| {
                let hi = if i < 20 { h } else { w } as f64;
                rng.gen_range(-1.5..hi + 0.5)
            });
            grad_check(
                &[x, coords],
                |t, v| t.bilinear_sample(v[0], v[1], mode),
                &opts,
            )
        }
        "proximity_conv" => {
            let (h, w) = (7, 8);
            let (range, valid) = range_map(&mut rng, h, w);
            let grid = Arc::new(build_proximity_grid(&range, &valid, h, w, (5, 5), 9)?);
            let inputs = [
                uniform(&mut rng, &[3, h, w], -1.0, 1.0),
                uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[4], -1.0, 1.0),
            ];
            grad_check(
                &inputs,
                |t, v| t.proximity_conv(v[0], Arc::clone(&grid), v[1], Some(v[2])),
                &opts,
            )
        }
        "feature_fusion" => {
            let (store, ids, ff) = module(&mut rng, |b| FeatureFusion::new(b, 3, 2));
            let inputs = [
                uniform(&mut rng, &[3, 6, 6], -1.0, 1.0),
                uniform(&mut rng, &[2, 6, 6], -1.0, 1.0),
            ];
            grad_check_with_params(
                &store,
                &ids,
                &inputs,
                |t, v| ff.forward(t, &store, v[0], v[1]),
                &opts,
            )
        }
        "range_guided_dws_conv" => {
            let (store, ids, rg) = module(&mut rng, |b| RangeGuidedConv::new(b, 3, 2, 4, 3.0));
            let inputs = [
                uniform(&mut rng, &[3, 8, 8], -1.0, 1.0),
                uniform(&mut rng, &[2, 8, 8], -1.0, 1.0),
            ];
            grad_check_with_params(
                &store,
                &ids,
                &inputs,
                |t, v| rg.forward(t, &store, v[0], v[1]),
                &opts,
            )
        }
        "rdpc" | "rlsfe" => {
            let head = HeadConfig::tiny(3);
            let inputs = [
                uniform(&mut rng, &[head.pyramid, 8, 8], -1.0, 1.0),
                uniform(&mut rng, &[head.ren, 8, 8], -1.0, 1.0),
            ];
            if name == "rdpc" {
                let (store, ids, m) = module(&mut rng, |b| Rdpc::new(b, &head));
                grad_check_with_params(
                    &store,
                    &ids,
                    &inputs,
                    |t, v| m.forward(t, &store, v[0], v[1]),
                    &opts,
                )
            } else {
                let (store, ids, m) = module(&mut rng, |b| Rlsfe::new(b, &head));
                grad_check_with_params(
                    &store,
                    &ids,
                    &inputs,
                    |t, v| m.forward(t, &store, v[0], v[1]),
                    &opts,
                )
            }
        }
        "semantic_head" => {
            let head = HeadConfig::tiny(3);
            let (store, ids, m) = module(&mut rng, |b| SemanticHead::new(b, &head));
            // the x4..x32 levels of a 64x128 input
            let mut inputs = Vec::with_capacity(8);
            for (c, lo, hi) in [(head.pyramid, -1.0, 1.0), (head.ren, 0.0, 1.5)] {
                for level in 0..4 {
                    inputs.push(uniform(&mut rng, &[c, 16 >> level, 32 >> level], lo, hi));
                }
            }
            grad_check_with_params(
                &store,
                &ids,
                &inputs,
                |t, v| m.forward(t, &store, &v[..4], &v[4..]),
                &opts,
            )
        }
        "fuse_logits" => {
            let inputs = [
                uniform(&mut rng, &[2, 5, 6], -3.0, 3.0),
                uniform(&mut rng, &[2, 5, 6], -3.0, 3.0),
            ];
            grad_check(&inputs, |t, v| t.fuse_logits(v[0], v[1]), &opts)
        }
        "lovasz" => {
            let (c, h, w) = (3, 4, 5);
            let mut target: Vec<Option<usize>> = (0..h * w)
                .map(|_| rng.gen_bool(0.9).then(|| rng.gen_range(0..c)))
                .collect();
            target[0] = Some(rng.gen_range(0..c));
            let logits = uniform(&mut rng, &[c, h, w], -2.0, 2.0);
            grad_check(
                &[logits],
                |t: &mut Tape<f64>, v: &[Var]| {
                    let probs = t.softmax(v[0])?;
                    lovasz_on_tape(t, probs, &target)
                },
                &opts,
            )
        }
        _ => unreachable!("operator list and dispatch disagree"),
    }
}

/// Checks `name` over `cfg.seeds` seeds.
pub fn run_operator(name: &str, cfg: &SuiteConfig) -> Result<OperatorReport> {
    let start = Instant::now();
    let mut report = OperatorReport {
        name: name.to_string(),
        seeds: cfg.seeds,
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        seconds: 0.0,
        passed: false,
    };
    for seed in 0..cfg.seeds as u64 {
        let r = check_operator(name, seed, cfg)?;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
        report.checked += r.checked;
        report.excluded += r.excluded;
    }
    report.seconds = start.elapsed().as_secs_f64();
    report.passed = report.checked > 0 && report.max_rel_error < cfg.tolerance;
    Ok(report)
}

/// Runs every operator in [`OPERATORS`].
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OperatorReport>> {
    OPERATORS
        .iter()
        .map(|name| run_operator(name, cfg))
        .collect()
}
