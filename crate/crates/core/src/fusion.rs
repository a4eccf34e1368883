//! Panoptic fusion of semantic logits with instance predictions, the
//! canonical 2D panoptic label map and the panoptic periphery loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ClassMap, PanopticMap};
use crate::kernels::{resize_bilinear, sigmoid_scalar, softmax_channelwise};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Value written to semantic logits outside an instance's bounding box.
pub const SUPPRESSION: f64 = -1e4;

/// Half-open pixel box: rows `row0..row1`, columns `col0..col1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        BBox {
            row0,
            col0,
            row1,
            col1,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BBox::new(0, 0, height, width)
    }

    pub fn height(&self) -> usize {
        self.row1.saturating_sub(self.row0)
    }

    pub fn width(&self) -> usize {
        self.col1.saturating_sub(self.col0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.row0 >= self.row1
            || self.col0 >= self.col1
            || self.row1 > height
            || self.col1 > width
        {
            return Err(Error::invalid(
                "instance_prediction",
                format!("bbox {self:?} is empty or outside the {height}x{width} canvas"),
            ));
        }
        Ok(())
    }
}

/// An externally produced instance: class, confidence, box and mask logits.
///
/// `mask_logits` is `(h, w)`: either the box extent (resized if it differs)
/// or the full canvas, in which case the box region is cut out directly.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
    pub mask_logits: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub c_t: f64,
    pub o_t: f64,
    pub min_sa: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            c_t: 0.5,
            o_t: 0.5,
            min_sa: 128,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_t", self.c_t), ("o_t", self.o_t)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(
                    "fusion_config",
                    format!("{name} = {v} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// An instance that survived thresholding and overlap filtering, with its
/// logits pasted onto the full canvas (`ML_A`).
#[derive(Clone, Debug)]
pub struct PreparedInstance<T> {
    /// Position in the caller's instance list.
    pub source: usize,
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
    /// `(H, W)`, zero outside the box.
    pub logits: Tensor<T>,
}

fn paste_mask<T: Scalar>(
    inst: &InstancePrediction,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let shape = inst.mask_logits.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(
            "instance_prediction",
            format!("mask logits must be 2-D, got {shape:?}"),
        ));
    }
    let b = inst.bbox;
    let mut canvas = Tensor::zeros(&[height, width]);
    let (mh, mw) = (shape[0], shape[1]);
    if (mh, mw) == (height, width) && (b.height(), b.width()) != (height, width) {
        let src = inst.mask_logits.data();
        for r in b.row0..b.row1 {
            for c in b.col0..b.col1 {
                canvas.data_mut()[r * width + c] = T::lit(src[r * width + c] as f64);
            }
        }
        return Ok(canvas);
    }
    let patch = if (mh, mw) == (b.height(), b.width()) {
        inst.mask_logits.clone()
    } else {
        let m = inst.mask_logits.clone().reshape(&[1, mh, mw])?;
        resize_bilinear(&m, b.height(), b.width())?
    };
    let src = patch.data();
    for r in 0..b.height() {
        for c in 0..b.width() {
            canvas.data_mut()[(b.row0 + r) * width + b.col0 + c] =
                T::lit(src[r * b.width() + c] as f64);
        }
    }
    Ok(canvas)
}

/// Thresholds by `c_t`, sorts by score (stable, descending), pastes each
/// mask onto the canvas and drops instances whose binarized mask overlaps
/// the already kept ones by more than `o_t` of its own area.
pub fn prepare_instance_logits<T: Scalar>(
    instances: &[InstancePrediction],
    height: usize,
    width: usize,
    map: &ClassMap,
    cfg: &FusionConfig,
) -> Result<Vec<PreparedInstance<T>>> {
    cfg.validate()?;
    for inst in instances {
        inst.bbox.validate(height, width)?;
        if !map.is_thing(inst.class_id) {
            return Err(Error::invalid(
                "instance_prediction",
                format!("class {} is not a thing class", inst.class_id),
            ));
        }
    }
    let mut order: Vec<usize> = (0..instances.len())
        .filter(|&i| instances[i].score >= cfg.c_t)
        .collect();
    order.sort_by(|&a, &b| instances[b].score.total_cmp(&instances[a].score));

    let mut occupied = vec![false; height * width];
    let mut kept = Vec::new();
    for i in order {
        let inst = &instances[i];
        let logits = paste_mask::<T>(inst, height, width)?;
        let (mut area, mut overlap) = (0usize, 0usize);
        for (p, v) in logits.data().iter().enumerate() {
            if *v > T::zero() {
                area += 1;
                overlap += occupied[p] as usize;
            }
        }
        if area == 0 || overlap as f64 > cfg.o_t * area as f64 {
            continue;
        }
        for (p, v) in logits.data().iter().enumerate() {
            if *v > T::zero() {
                occupied[p] = true;
            }
        }
        kept.push(PreparedInstance {
            source: i,
            class_id: inst.class_id,
            score: inst.score,
            bbox: inst.bbox,
            logits,
        });
    }
    Ok(kept)
}

/// `ML_B`: the semantic channel of the instance's class with everything
/// outside the box set to [`SUPPRESSION`]. `sem` is `(C, H, W)` in the class
/// map's channel order.
pub fn prepare_semantic_logits<T: Scalar>(
    sem: &Tensor<T>,
    class_id: u32,
    bbox: BBox,
    map: &ClassMap,
) -> Result<Tensor<T>> {
    let (c, h, w) = sem.chw("prepare_semantic_logits")?;
    let ch = map
        .channel_of(class_id)
        .filter(|&ch| ch < c)
        .ok_or_else(|| {
            Error::invalid(
                "prepare_semantic_logits",
                format!("no logit channel for class {class_id}"),
            )
        })?;
    bbox.validate(h, w)?;
    let src = sem.channel(ch);
    let suppressed = T::lit(SUPPRESSION);
    Ok(Tensor::from_fn(&[h, w], |p| {
        if bbox.contains(p / w, p % w) {
            src[p]
        } else {
            suppressed
        }
    }))
}

/// `FL = (sigmoid(A) + sigmoid(B)) * (A + B)`, elementwise.
pub fn fuse_logits<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "fuse_logits", |x, y| {
        (sigmoid_scalar(x) + sigmoid_scalar(y)) * (x + y)
    })
}

pub fn fuse_logits_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.shape() != b.shape() || a.shape() != gy.shape() {
        return Err(Error::shape("fuse_logits", a.shape(), b.shape()));
    }
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(a.shape());
    for i in 0..a.len() {
        let (x, y, g) = (a.data()[i], b.data()[i], gy.data()[i]);
        let (sx, sy) = (sigmoid_scalar(x), sigmoid_scalar(y));
        let (sum_s, sum) = (sx + sy, x + y);
        ga.data_mut()[i] = g * (sx * (T::one() - sx) * sum + sum_s);
        gb.data_mut()[i] = g * (sy * (T::one() - sy) * sum + sum_s);
    }
    Ok((ga, gb))
}

/// Fusion logits: the stuff channels of `sem` followed by one fused channel
/// per prepared instance.
pub fn fusion_logits<T: Scalar>(
    sem: &Tensor<T>,
    kept: &[PreparedInstance<T>],
    map: &ClassMap,
) -> Result<Tensor<T>> {
    let (_, h, w) = sem.chw("fusion_logits")?;
    let stuff = stuff_channels(map);
    let mut data = Vec::with_capacity((stuff.len() + kept.len()) * h * w);
    for &ch in &stuff {
        data.extend_from_slice(sem.channel(ch));
    }
    for inst in kept {
        let ml_b = prepare_semantic_logits(sem, inst.class_id, inst.bbox, map)?;
        data.extend(fuse_logits(&inst.logits, &ml_b)?.into_data());
    }
    Tensor::from_vec(&[stuff.len() + kept.len(), h, w], data)
}

/// Channel indices (class map order) of the evaluated stuff classes.
pub fn stuff_channels(map: &ClassMap) -> Vec<usize> {
    (0..map.num_classes())
        .filter(|&ch| map.is_stuff(map.class_of_channel(ch)))
        .collect()
}

/// The fused panoptic prediction with the per-pixel winning channel.
#[derive(Clone, Debug)]
pub struct Canonical {
    pub panoptic: PanopticMap,
    /// Index into `stuff ++ instances` of the channel that won each pixel.
    pub winners: Vec<usize>,
}

/// Softmax and argmax over `stuff ++ instance` channels. Pixels won by an
/// instance take its class and a contiguous id (in channel order, counting
/// only instances that win a pixel); the rest take the winning stuff class,
/// and stuff classes covering fewer than `min_sa` pixels become ignore.
pub fn canonical_panoptic<T: Scalar>(
    logits: &Tensor<T>,
    instance_classes: &[u32],
    map: &ClassMap,
    cfg: &FusionConfig,
) -> Result<Canonical> {
    let (c, h, w) = logits.chw("canonical_panoptic")?;
    let stuff: Vec<u32> = stuff_channels(map)
        .into_iter()
        .map(|ch| map.class_of_channel(ch))
        .collect();
    if c != stuff.len() + instance_classes.len() {
        return Err(Error::shape(
            "canonical_panoptic",
            &[stuff.len() + instance_classes.len(), h, w],
            logits.shape(),
        ));
    }
    if c == 0 {
        return Ok(Canonical {
            panoptic: PanopticMap::filled(h, w, map.ignore_id()),
            winners: vec![0; h * w],
        });
    }
    let probs = softmax_channelwise(logits)?;
    let n = h * w;
    let winners: Vec<usize> = (0..n)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if probs.data()[ch * n + p] > probs.data()[best * n + p] {
                    best = ch;
                }
            }
            best
        })
        .collect();

    let mut ids = vec![0u32; instance_classes.len()];
    let mut next = 1;
    let mut panoptic = PanopticMap::filled(h, w, map.ignore_id());
    for (p, &win) in winners.iter().enumerate() {
        if win < stuff.len() {
            panoptic.semantic[p] = stuff[win];
        } else {
            let k = win - stuff.len();
            if ids[k] == 0 {
                ids[k] = next;
                next += 1;
            }
            panoptic.semantic[p] = instance_classes[k];
            panoptic.instance[p] = ids[k];
        }
    }
    let mut area = vec![0usize; map.classes.len()];
    for (&s, &i) in panoptic.semantic.iter().zip(&panoptic.instance) {
        if i == 0 {
            area[s as usize] += 1;
        }
    }
    for s in panoptic.semantic.iter_mut() {
        if map.is_stuff(*s) && area[*s as usize] < cfg.min_sa {
            *s = map.ignore_id();
        }
    }
    Ok(Canonical { panoptic, winners })
}

/// Output of [`panoptic_fusion`].
#[derive(Clone, Debug)]
pub struct FusionOutput<T> {
    pub canonical: Canonical,
    pub kept: Vec<PreparedInstance<T>>,
    pub logits: Tensor<T>,
}

/// The complete fusion path from semantic logits `(C, H, W)` and raw
/// instance predictions to a panoptic label map.
pub fn panoptic_fusion<T: Scalar>(
    sem: &Tensor<T>,
    instances: &[InstancePrediction],
    map: &ClassMap,
    cfg: &FusionConfig,
) -> Result<FusionOutput<T>> {
    let (c, h, w) = sem.chw("panoptic_fusion")?;
    if c != map.num_classes() {
        return Err(Error::shape(
            "panoptic_fusion",
            &[map.num_classes(), h, w],
            sem.shape(),
        ));
    }
    let kept = prepare_instance_logits(instances, h, w, map, cfg)?;
    let logits = fusion_logits(sem, &kept, map)?;
    let classes: Vec<u32> = kept.iter().map(|k| k.class_id).collect();
    let canonical = canonical_panoptic(&logits, &classes, map, cfg)?;
    Ok(FusionOutput {
        canonical,
        kept,
        logits,
    })
}

/// Per-boundary-pixel terms of the periphery loss: `(pixel, max over
/// background 4-neighbours of (r_b - r_n)^2)`. Boundary pixels without a
/// background neighbour are left out.
pub fn periphery_terms(panoptic: &PanopticMap, range: &[f32]) -> Result<Vec<(usize, f64)>> {
    let (h, w) = (panoptic.height, panoptic.width);
    if range.len() != h * w {
        return Err(Error::shape("periphery_loss", &[h * w], &[range.len()]));
    }
    let key = |p: usize| (panoptic.semantic[p], panoptic.instance[p]);
    let mut terms = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if panoptic.instance[p] == 0 {
                continue;
            }
            let mut best: Option<f64> = None;
            let neighbours = [
                (r > 0).then(|| p - w),
                (r + 1 < h).then(|| p + w),
                (c > 0).then(|| p - 1),
                (c + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if key(q) == key(p) || panoptic.instance[q] != 0 {
                    continue;
                }
                let d = (range[p] - range[q]) as f64;
                best = Some(best.map_or(d * d, |b: f64| b.max(d * d)));
            }
            if let Some(b) = best {
                terms.push((p, b));
            }
        }
    }
    Ok(terms)
}

/// Negated mean over boundary pixels of the largest squared range gap to a
/// background 4-neighbour. Zero when there is no such pixel.
pub fn periphery_loss(panoptic: &PanopticMap, range: &[f32]) -> Result<f64> {
    let terms = periphery_terms(panoptic, range)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(-terms.iter().map(|t| t.1).sum::<f64>() / terms.len() as f64)
}

/// Records the periphery loss on a tape. The value is the hard loss; the
/// gradient flows into `logits` through the softmax probability of each
/// boundary pixel's winning channel, scaled by that pixel's term.
pub fn periphery_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    canonical: &Canonical,
    range: &[f32],
) -> Result<Var> {
    let probs = tape.softmax(logits)?;
    let shape = tape.value(probs).shape().to_vec();
    let n = canonical.panoptic.len();
    let terms = periphery_terms(&canonical.panoptic, range)?;
    let mut grad = Tensor::zeros(&shape);
    if terms.is_empty() {
        return tape.scalar_with_grad(probs, T::zero(), grad);
    }
    let inv = 1.0 / terms.len() as f64;
    let mut value = 0.0;
    for &(p, t) in &terms {
        value -= t * inv;
        grad.data_mut()[canonical.winners[p] * n + p] = T::lit(-t * inv);
    }
    tape.scalar_with_grad(probs, T::lit(value), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> ClassMap {
        ClassMap::preset("synthetic").unwrap()
    }

    fn square(class_id: u32, score: f64, bbox: BBox, logit: f32) -> InstancePrediction {
        InstancePrediction {
            class_id,
            score,
            bbox,
            mask_logits: Tensor::full(&[bbox.height(), bbox.width()], logit),
        }
    }

    #[test]
    fn fl_point_values() {
        let one = Tensor::<f64>::full(&[1], 1.0);
        let fl = fuse_logits(&one, &one).unwrap().data()[0];
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((fl - 4.0 * s).abs() < 1e-12);
        assert!((fl - 2.9242).abs() < 1e-3);
        let zero = Tensor::<f64>::zeros(&[1]);
        assert_eq!(fuse_logits(&zero, &zero).unwrap().data()[0], 0.0);
    }

    #[test]
    fn fl_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(
            fuse_logits(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn low_score_is_dropped() {
        let b = BBox::new(0, 0, 2, 2);
        let kept = prepare_instance_logits::<f32>(
            &[square(4, 0.9, b, 1.0), square(4, 0.4, b, 1.0)],
            4,
            4,
            &map(),
            &FusionConfig::default(),
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source, 0);
    }

    #[test]
    fn identical_masks_keep_the_higher_score() {
        let b = BBox::new(1, 1, 3, 3);
        let kept = prepare_instance_logits::<f32>(
            &[square(4, 0.8, b, 1.0), square(5, 0.9, b, 1.0)],
            4,
            4,
            &map(),
            &FusionConfig::default(),
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].class_id, 5);
        assert!(
            prepare_instance_logits::<f32>(&[], 4, 4, &map(), &FusionConfig::default())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn stuff_instance_is_rejected() {
        let b = BBox::new(0, 0, 1, 1);
        assert!(prepare_instance_logits::<f32>(
            &[square(1, 0.9, b, 1.0)],
            4,
            4,
            &map(),
            &FusionConfig::default()
        )
        .is_err());
        let outside = BBox::new(0, 0, 5, 1);
        assert!(prepare_instance_logits::<f32>(
            &[square(4, 0.9, outside, 1.0)],
            4,
            4,
            &map(),
            &FusionConfig::default()
        )
        .is_err());
    }

    #[test]
    fn semantic_suppression() {
        let sem = Tensor::<f32>::from_fn(&[5, 3, 3], |i| i as f32);
        let full = prepare_semantic_logits(&sem, 4, BBox::full(3, 3), &map()).unwrap();
        assert_eq!(full.data(), sem.channel(3));
        let one = prepare_semantic_logits(&sem, 4, BBox::new(1, 1, 2, 2), &map()).unwrap();
        assert_eq!(one.data().iter().filter(|&&v| v > -1e3).count(), 1);
        let probs = softmax_channelwise(
            &Tensor::from_vec(&[2, 1, 1], vec![SUPPRESSION as f32, 1e4]).unwrap(),
        )
        .unwrap();
        assert!(probs.all_finite());
    }

    #[test]
    fn dominant_instance_wins_its_square() {
        let sem = Tensor::<f32>::zeros(&[5, 4, 4]);
        let b = BBox::new(1, 1, 3, 3);
        let cfg = FusionConfig {
            min_sa: 0,
            ..FusionConfig::default()
        };
        let out = panoptic_fusion(&sem, &[square(4, 0.9, b, 10.0)], &map(), &cfg).unwrap();
        let pan = &out.canonical.panoptic;
        for r in 0..4 {
            for c in 0..4 {
                let (s, i) = pan.at(r, c);
                if b.contains(r, c) {
                    assert_eq!((s, i), (4, 1));
                } else {
                    assert!(map().is_stuff(s));
                    assert_eq!(i, 0);
                }
            }
        }
    }

    #[test]
    fn small_stuff_region_becomes_ignore() {
        // 100 pixels of road inside 300 pixels of building
        let (h, w) = (10, 30);
        let sem = Tensor::<f32>::from_fn(&[5, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            let road = p % w < 10;
            match (ch, road) {
                (0, true) | (1, false) => 5.0,
                _ => 0.0,
            }
        });
        let out = panoptic_fusion(&sem, &[], &map(), &FusionConfig::default()).unwrap();
        let pan = out.canonical.panoptic;
        assert_eq!(pan.semantic.iter().filter(|&&s| s == 0).count(), 100);
        assert_eq!(pan.semantic.iter().filter(|&&s| s == 2).count(), 200);
    }

    fn one_pixel_instance(h: usize, w: usize, p: usize) -> PanopticMap {
        let mut pan = PanopticMap::filled(h, w, 1);
        pan.semantic[p] = 4;
        pan.instance[p] = 1;
        pan
    }

    #[test]
    fn periphery_hand_cases() {
        // boundary pixel r_b = 10 with a single neighbour r_n = 8
        let pan = one_pixel_instance(1, 2, 0);
        assert_eq!(periphery_loss(&pan, &[10.0, 8.0]).unwrap(), -4.0);

        let mut full = PanopticMap::filled(2, 2, 4);
        full.instance.fill(1);
        assert_eq!(periphery_loss(&full, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);

        // two boundary pixels with squared gaps 4 and 16
        let mut two = PanopticMap::filled(1, 4, 1);
        two.semantic[1] = 4;
        two.instance[1] = 1;
        two.semantic[2] = 4;
        two.instance[2] = 1;
        assert_eq!(periphery_loss(&two, &[8.0, 10.0, 5.0, 1.0]).unwrap(), -10.0);
    }

    #[test]
    fn instance_neighbours_are_not_background() {
        let mut pan = PanopticMap::filled(1, 2, 4);
        pan.instance = vec![1, 2];
        assert_eq!(periphery_loss(&pan, &[10.0, 0.0]).unwrap(), 0.0);
    }
}
