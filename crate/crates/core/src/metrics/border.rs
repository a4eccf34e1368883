//! IoU restricted to a band around ground-truth segment boundaries.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::{ClassMap, PanopticMap};

/// Pixels whose Chebyshev distance to a ground-truth boundary pixel is
/// below `width`. A boundary pixel has a 4-neighbour with a different
/// `(semantic, instance)` label.
pub fn border_band(gt: &PanopticMap, width: usize) -> Vec<bool> {
    let (h, w) = (gt.height, gt.width);
    let key = |p: usize| (gt.semantic[p], gt.instance[p]);
    let mut boundary = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let differs = |q: usize| key(q) != key(p);
            boundary[p] = (r > 0 && differs(p - w))
                || (r + 1 < h && differs(p + w))
                || (c > 0 && differs(p - 1))
                || (c + 1 < w && differs(p + 1));
        }
    }
    if width == 0 {
        return vec![false; h * w];
    }
    let reach = width - 1;
    let mut band = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !boundary[r * w + c] {
                continue;
            }
            for rr in r.saturating_sub(reach)..=(r + reach).min(h - 1) {
                for cc in c.saturating_sub(reach)..=(c + reach).min(w - 1) {
                    band[rr * w + cc] = true;
                }
            }
        }
    }
    band
}

/// Per-class `(intersection, union)` counts over the border band, for
/// classes present in the band on either side (optionally restricted to
/// `classes`). Counts of several maps add up to their joint border IoU.
pub fn border_counts(
    pred: &PanopticMap,
    gt: &PanopticMap,
    width: usize,
    map: &ClassMap,
    classes: Option<&[u32]>,
) -> Result<BTreeMap<u32, (u64, u64)>> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "border_iou",
            &[gt.height, gt.width],
            &[pred.height, pred.width],
        ));
    }
    let band = border_band(gt, width);
    let mut counts: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    let wanted = |c: u32| c != map.ignore_id() && classes.is_none_or(|set| set.contains(&c));
    for p in 0..band.len() {
        let (ps, gs) = (pred.semantic[p], gt.semantic[p]);
        if !band[p] || gs == map.ignore_id() {
            continue;
        }
        if wanted(gs) {
            let e = counts.entry(gs).or_default();
            e.1 += 1;
            if ps == gs {
                e.0 += 1;
            }
        }
        if wanted(ps) && ps != gs {
            counts.entry(ps).or_default().1 += 1;
        }
    }
    Ok(counts)
}

/// Per-class semantic IoU over the border band.
pub fn border_iou(
    pred: &PanopticMap,
    gt: &PanopticMap,
    width: usize,
    map: &ClassMap,
    classes: Option<&[u32]>,
) -> Result<BTreeMap<u32, f64>> {
    let counts = border_counts(pred, gt, width, map, classes)?;
    Ok(counts
        .into_iter()
        .map(|(c, (i, u))| (c, i as f64 / u as f64))
        .collect())
}
