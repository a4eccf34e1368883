//! Toy training of the semantic pipeline on synthetic scenes.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadConfig, SemanticNet};
use crate::io::{ClassMap, PanopticMap};
use crate::loss::{semantic_loss_channels, target_channels};
use crate::nn::Builder;
use crate::projection::{project, Projection, ProjectionConfig, RangeImage};
use crate::range_ops::{build_proximity_grid, ProximityGrid};
use crate::synth::{render_scene, scene_layout};
use crate::tape::Tape;
use crate::tensor::{ParamStore, Tensor};

/// Network-ready inputs of one projected scan.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RangeImage,
    /// `(5, H, W)` channels.
    pub input: Tensor<f32>,
    /// `(1, H, W)` range channel.
    pub range: Tensor<f32>,
    pub grid: Arc<ProximityGrid>,
    pub labels: PanopticMap,
}

/// Fixed per-channel scale applied to the range image before the network
/// (range, intensity, x, y, z), bringing metres and reflectance to
/// comparable magnitudes.
pub const INPUT_SCALE: [f32; 5] = [0.05, 1.0, 0.05, 0.05, 0.05];

/// Proximity grid search window and neighbour count of the stem.
pub const PROXIMITY_SEARCH: (usize, usize) = (5, 5);

impl Scene {
    pub fn from_projection(p: Projection, k: usize) -> Result<Self> {
        let img = p.image;
        let (h, w) = (img.height, img.width);
        let labels = p.labels.unwrap_or_else(|| PanopticMap::filled(h, w, 0));
        let grid = build_proximity_grid(img.range(), &img.valid, h, w, PROXIMITY_SEARCH, k)?;
        let n = h * w;
        let range = Tensor::from_vec(
            &[1, h, w],
            img.range().iter().map(|v| v * INPUT_SCALE[0]).collect(),
        )?;
        let input = Tensor::from_fn(img.channels.shape(), |i| {
            img.channels.data()[i] * INPUT_SCALE[i / n]
        });
        Ok(Scene {
            input,
            range,
            grid: Arc::new(grid),
            labels,
            image: img,
        })
    }
}

/// Deterministic synthetic scenes of `rows x width` pixels.
pub fn synthetic_scenes(
    count: usize,
    rows: usize,
    width: usize,
    seed: u64,
    k: usize,
) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ProjectionConfig {
        width,
        rows: Some(rows),
        ..ProjectionConfig::default()
    };
    (0..count)
        .map(|_| {
            let layout = scene_layout(&mut rng, rows, width);
            let (cloud, labels) = render_scene(&mut rng, &layout, 0.02);
            Scene::from_projection(project(&cloud, Some(&labels), &cfg)?, k)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub scenes: usize,
    pub rows: usize,
    pub width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 0.01,
            momentum: 0.9,
            seed: 7,
            scenes: 5,
            rows: 32,
            width: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub net: SemanticNet,
    pub store: ParamStore<f32>,
    velocity: Vec<Vec<f32>>,
}

impl Model {
    pub fn new(cfg: HeadConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SemanticNet::new(&mut Builder::new(&mut store, &mut rng), cfg);
        let velocity = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Model {
            net,
            store,
            velocity,
        }
    }

    pub fn from_parts(net: SemanticNet, store: ParamStore<f32>) -> Self {
        let velocity = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Model {
            net,
            store,
            velocity,
        }
    }

    pub fn logits(&self, scene: &Scene) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.leaf(scene.input.clone());
        let r = tape.leaf(scene.range.clone());
        let out = self
            .net
            .forward(&mut tape, &self.store, x, r, &scene.grid)?;
        Ok(tape.value(out).clone())
    }

    /// Per-pixel learning id by argmax over the logit channels.
    pub fn predict(&self, scene: &Scene, map: &ClassMap) -> Result<Vec<u32>> {
        Ok(argmax_classes(&self.logits(scene)?, map))
    }

    /// One full-batch SGD step with heavy-ball momentum; returns the mean
    /// loss before the update.
    pub fn sgd_step(
        &mut self,
        scenes: &[Scene],
        map: &ClassMap,
        lr: f64,
        momentum: f64,
    ) -> Result<f64> {
        self.store.reset_grads();
        let mut total = 0.0;
        for scene in scenes {
            let mut tape = Tape::new();
            let x = tape.leaf(scene.input.clone());
            let r = tape.leaf(scene.range.clone());
            let logits = self
                .net
                .forward(&mut tape, &self.store, x, r, &scene.grid)?;
            let target = target_channels(&scene.labels.semantic, map);
            let loss = semantic_loss_channels(&mut tape, logits, &target)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss",
                });
            }
            total += value as f64;
            tape.backward(loss, Tensor::scalar(1.0 / scenes.len() as f32))?;
            tape.accumulate_param_grads(&mut self.store)?;
        }
        let (lr, mu) = (lr as f32, momentum as f32);
        for (p, v) in self.store.iter_mut().zip(&mut self.velocity) {
            for ((x, &g), u) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(v.iter_mut())
            {
                *u = mu * *u + g;
                *x -= lr * *u;
            }
        }
        Ok(total / scenes.len() as f64)
    }
}

pub fn argmax_classes(logits: &Tensor<f32>, map: &ClassMap) -> Vec<u32> {
    let s = logits.shape();
    let (c, n) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..n)
        .map(|p| {
            let best = (1..c).fold(0, |b, k| if d[k * n + p] > d[b * n + p] { k } else { b });
            map.class_of_channel(best)
        })
        .collect()
}

/// Fraction of non-ignored pixels whose prediction matches.
pub fn pixel_accuracy(pred: &[u32], target: &[u32], ignore_id: u32) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        if t != ignore_id {
            total += 1;
            hit += (p == t) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub accuracy: f64,
    /// Step after which accuracy first reached the target, if tracked.
    pub reached_at: Option<usize>,
}

/// Pixel accuracy over a batch of scenes.
pub fn batch_accuracy(model: &Model, scenes: &[Scene], map: &ClassMap) -> Result<f64> {
    let (mut hit, mut total) = (0.0, 0.0);
    for s in scenes {
        let pred = model.predict(s, map)?;
        let n = s
            .labels
            .semantic
            .iter()
            .filter(|&&t| t != map.ignore_id())
            .count() as f64;
        hit += pixel_accuracy(&pred, &s.labels.semantic, map.ignore_id()) * n;
        total += n;
    }
    Ok(if total == 0.0 { 0.0 } else { hit / total })
}

/// Trains a fresh model with SGD at a constant learning rate. `on_step(step, loss)` is called
/// after every step; with `target` set, training stops once the batch
/// accuracy (checked every `check_every` steps) reaches it.
pub fn train_toy(
    cfg: &TrainConfig,
    head: HeadConfig,
    map: &ClassMap,
    target: Option<(f64, usize)>,
    on_step: impl FnMut(usize, f64),
) -> Result<(Model, Vec<Scene>, TrainOutcome)> {
    let k = head.proximity_kernel.0 * head.proximity_kernel.1;
    let scenes = synthetic_scenes(cfg.scenes, cfg.rows, cfg.width, cfg.seed, k)?;
    let model = Model::new(head, cfg.seed);
    let (model, outcome) = train_model(model, &scenes, cfg, map, target, on_step)?;
    Ok((model, scenes, outcome))
}

/// Continues training `model` on `scenes` for `cfg.steps` steps; the
/// second phase of a schedule that first fits pseudo-labeled scans.
pub fn train_model(
    mut model: Model,
    scenes: &[Scene],
    cfg: &TrainConfig,
    map: &ClassMap,
    target: Option<(f64, usize)>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Model, TrainOutcome)> {
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut reached_at = None;
    for step in 0..cfg.steps {
        let loss = model.sgd_step(scenes, map, cfg.lr, cfg.momentum)?;
        losses.push(loss);
        on_step(step, loss);
        if let Some((goal, every)) = target {
            if (step + 1) % every.max(1) == 0 && batch_accuracy(&model, scenes, map)? >= goal {
                reached_at = Some(step + 1);
                break;
            }
        }
    }
    let accuracy = batch_accuracy(&model, scenes, map)?;
    Ok((
        model,
        TrainOutcome {
            losses,
            accuracy,
            reached_at,
        },
    ))
}
