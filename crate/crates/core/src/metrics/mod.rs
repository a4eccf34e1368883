//! Panoptic quality (PQ, SQ, RQ, PQ-dagger), mIoU and border-IoU.
//!
//! Segments are `(class, instance)` groups: one per nonzero instance id for
//! thing classes, one per class for stuff. Elements whose ground truth is
//! the ignore class are dropped from both sides; predicted ignore elements
//! belong to no segment and never count as false positives.

pub mod border;
pub mod oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ClassMap, LabelSet};

pub use border::{border_band, border_counts, border_iou};
pub use oracle::pq_oracle;

/// Matching outcome of one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMatch {
    /// `(pred instance, gt instance, IoU)`, sorted by gt instance per scan.
    pub tp: Vec<(u32, u32, f64)>,
    pub fp: Vec<u32>,
    pub fn_: Vec<u32>,
}

impl ClassMatch {
    pub fn is_empty(&self) -> bool {
        self.tp.is_empty() && self.fp.is_empty() && self.fn_.is_empty()
    }

    pub fn iou_sum(&self) -> f64 {
        self.tp.iter().map(|t| t.2).sum()
    }
}

/// Semantic intersection and per-side element counts of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl IouCounts {
    pub fn iou(&self) -> Option<f64> {
        let union = self.pred + self.gt - self.intersection;
        (union > 0).then(|| self.intersection as f64 / union as f64)
    }

    fn add(&mut self, o: &IouCounts) {
        self.intersection += o.intersection;
        self.pred += o.pred;
        self.gt += o.gt;
    }
}

/// Segment matching and semantic counts, mergeable across scans.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub classes: BTreeMap<u32, ClassMatch>,
    pub semantic: BTreeMap<u32, IouCounts>,
}

impl SegmentMatch {
    /// Appends another scan's results; the result depends on merge order
    /// only through the floating-point order of IoU sums.
    pub fn merge(&mut self, other: &SegmentMatch) {
        for (c, m) in &other.classes {
            let e = self.classes.entry(*c).or_default();
            e.tp.extend_from_slice(&m.tp);
            e.fp.extend_from_slice(&m.fp);
            e.fn_.extend_from_slice(&m.fn_);
        }
        for (c, s) in &other.semantic {
            self.semantic.entry(*c).or_default().add(s);
        }
    }
}

pub(crate) fn check_lengths(pred: &LabelSet, gt: &LabelSet) -> Result<()> {
    for (a, b) in [
        (pred.semantic.len(), gt.semantic.len()),
        (pred.instance.len(), gt.semantic.len()),
        (gt.instance.len(), gt.semantic.len()),
    ] {
        if a != b {
            return Err(Error::shape("match_segments", &[b], &[a]));
        }
    }
    Ok(())
}

/// Segment key of an element, `None` when it belongs to no segment.
pub(crate) fn segment_key(semantic: u32, instance: u32, map: &ClassMap) -> Option<(u32, u32)> {
    if semantic == map.ignore_id() || (semantic as usize) >= map.classes.len() {
        None
    } else if map.is_thing(semantic) {
        (instance != 0).then_some((semantic, instance))
    } else {
        Some((semantic, 0))
    }
}

pub(crate) fn semantic_counts(
    pred: &LabelSet,
    gt: &LabelSet,
    map: &ClassMap,
) -> BTreeMap<u32, IouCounts> {
    let mut counts: BTreeMap<u32, IouCounts> = BTreeMap::new();
    for (&p, &g) in pred.semantic.iter().zip(&gt.semantic) {
        if g == map.ignore_id() {
            continue;
        }
        counts.entry(g).or_default().gt += 1;
        if p != map.ignore_id() {
            let e = counts.entry(p).or_default();
            e.pred += 1;
            if p == g {
                e.intersection += 1;
            }
        }
    }
    counts
}

/// Unique matching of same-class segments at IoU > 0.5.
pub fn match_segments(pred: &LabelSet, gt: &LabelSet, map: &ClassMap) -> Result<SegmentMatch> {
    check_lengths(pred, gt)?;
    let mut pred_area: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut gt_area: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut inter: BTreeMap<((u32, u32), (u32, u32)), u64> = BTreeMap::new();
    for i in 0..gt.len() {
        if gt.semantic[i] == map.ignore_id() {
            continue;
        }
        let g = segment_key(gt.semantic[i], gt.instance[i], map);
        let p = segment_key(pred.semantic[i], pred.instance[i], map);
        if let Some(g) = g {
            *gt_area.entry(g).or_insert(0) += 1;
        }
        if let Some(p) = p {
            *pred_area.entry(p).or_insert(0) += 1;
        }
        if let (Some(p), Some(g)) = (p, g) {
            if p.0 == g.0 {
                *inter.entry((p, g)).or_insert(0) += 1;
            }
        }
    }

    let mut out = SegmentMatch {
        semantic: semantic_counts(pred, gt, map),
        ..SegmentMatch::default()
    };
    let mut matched_pred = BTreeMap::new();
    let mut matched_gt = BTreeMap::new();
    for (&(p, g), &n) in &inter {
        let union = pred_area[&p] + gt_area[&g] - n;
        let iou = n as f64 / union as f64;
        // IoU > 0.5 on both sides makes the match unique
        if 2 * n > union {
            matched_pred.insert(p, g);
            matched_gt.insert(g, (p, iou));
        }
    }
    for (&g, &(p, iou)) in &matched_gt {
        out.classes.entry(g.0).or_default().tp.push((p.1, g.1, iou));
    }
    for &p in pred_area.keys() {
        if !matched_pred.contains_key(&p) {
            out.classes.entry(p.0).or_default().fp.push(p.1);
        }
    }
    for &g in gt_area.keys() {
        if !matched_gt.contains_key(&g) {
            out.classes.entry(g.0).or_default().fn_.push(g.1);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub name: String,
    pub thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Semantic IoU; `None` when the class is absent from both sides.
    pub iou: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pq: f64,
    pub pq_dagger: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_th: f64,
    pub sq_th: f64,
    pub rq_th: f64,
    pub pq_st: f64,
    pub sq_st: f64,
    pub rq_st: f64,
    pub miou: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Classes present in ground truth or prediction, by learning id.
    pub per_class: Vec<ClassReport>,
    /// Border-IoU per class, when computed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub border_iou: BTreeMap<u32, f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-class `(PQ, SQ, RQ)` from TP IoU sum and counts.
pub fn quality(iou_sum: f64, tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    if denom == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    let rq = tp as f64 / denom;
    (sq * rq, sq, rq)
}

/// PQ family and mIoU from a (possibly merged) match.
pub fn panoptic_scores(m: &SegmentMatch, map: &ClassMap) -> EvalReport {
    let mut per_class = Vec::new();
    for (&c, cm) in &m.classes {
        if cm.is_empty() {
            continue;
        }
        let (pq, sq, rq) = quality(cm.iou_sum(), cm.tp.len(), cm.fp.len(), cm.fn_.len());
        per_class.push(ClassReport {
            class_id: c,
            name: map.name_of(c).to_string(),
            thing: map.is_thing(c),
            pq,
            sq,
            rq,
            iou: m.semantic.get(&c).and_then(IouCounts::iou),
            tp: cm.tp.len(),
            fp: cm.fp.len(),
            fn_: cm.fn_.len(),
        });
    }
    let pick = |thing: Option<bool>, f: fn(&ClassReport) -> f64| {
        mean(
            per_class
                .iter()
                .filter(|r| thing.is_none_or(|t| r.thing == t))
                .map(f),
        )
    };
    let miou = mean(
        m.semantic
            .iter()
            .filter(|(&c, s)| s.gt > 0 && c != map.ignore_id())
            .filter_map(|(_, s)| s.iou()),
    );
    EvalReport {
        pq: pick(None, |r| r.pq),
        pq_dagger: mean(
            per_class
                .iter()
                .map(|r| if r.thing { r.pq } else { r.iou.unwrap_or(0.0) }),
        ),
        sq: pick(None, |r| r.sq),
        rq: pick(None, |r| r.rq),
        pq_th: pick(Some(true), |r| r.pq),
        sq_th: pick(Some(true), |r| r.sq),
        rq_th: pick(Some(true), |r| r.rq),
        pq_st: pick(Some(false), |r| r.pq),
        sq_st: pick(Some(false), |r| r.sq),
        rq_st: pick(Some(false), |r| r.rq),
        miou,
        tp: per_class.iter().map(|r| r.tp).sum(),
        fp: per_class.iter().map(|r| r.fp).sum(),
        fn_: per_class.iter().map(|r| r.fn_).sum(),
        per_class,
        border_iou: BTreeMap::new(),
    }
}

/// Per-class semantic IoU over non-ignored ground truth and the mean over
/// classes present in the ground truth.
pub fn miou(pred: &[u32], gt: &[u32], map: &ClassMap) -> Result<(BTreeMap<u32, f64>, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("miou", &[gt.len()], &[pred.len()]));
    }
    let zeros = vec![0; gt.len()];
    let p = LabelSet {
        semantic: pred.to_vec(),
        instance: zeros.clone(),
    };
    let g = LabelSet {
        semantic: gt.to_vec(),
        instance: zeros,
    };
    let counts = semantic_counts(&p, &g, map);
    let per: BTreeMap<u32, f64> = counts
        .iter()
        .filter(|(_, s)| s.gt > 0)
        .filter_map(|(&c, s)| s.iou().map(|v| (c, v)))
        .collect();
    let m = mean(per.values().copied());
    Ok((per, m))
}

/// Matches and scores a single pair.
pub fn evaluate(pred: &LabelSet, gt: &LabelSet, map: &ClassMap) -> Result<EvalReport> {
    Ok(panoptic_scores(&match_segments(pred, gt, map)?, map))
}
