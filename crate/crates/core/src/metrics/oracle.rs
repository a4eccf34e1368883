//! Brute-force reference for [`super::match_segments`] and
//! [`super::panoptic_scores`]: every segment pair's IoU is counted from
//! scratch and pairs are matched greedily from the highest IoU down.

use crate::error::Result;
use crate::io::{ClassMap, LabelSet};

use super::{check_lengths, ClassReport, EvalReport};

struct Segment {
    class: u32,
    instance: u32,
    members: Vec<bool>,
}

fn segments(labels: &LabelSet, keep: &[bool], map: &ClassMap) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for i in 0..labels.len() {
        let (s, inst) = (labels.semantic[i], labels.instance[i]);
        if !keep[i] || s == map.ignore_id() || (s as usize) >= map.classes.len() {
            continue;
        }
        let inst = if map.is_thing(s) {
            if inst == 0 {
                continue;
            }
            inst
        } else {
            0
        };
        match out.iter_mut().find(|g| g.class == s && g.instance == inst) {
            Some(g) => g.members[i] = true,
            None => {
                let mut members = vec![false; labels.len()];
                members[i] = true;
                out.push(Segment {
                    class: s,
                    instance: inst,
                    members,
                });
            }
        }
    }
    out
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a
        .members
        .iter()
        .zip(&b.members)
        .filter(|(&x, &y)| x && y)
        .count();
    let union = a
        .members
        .iter()
        .zip(&b.members)
        .filter(|(&x, &y)| x || y)
        .count();
    inter as f64 / union as f64
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn pq_oracle(pred: &LabelSet, gt: &LabelSet, map: &ClassMap) -> Result<EvalReport> {
    check_lengths(pred, gt)?;
    let keep: Vec<bool> = gt.semantic.iter().map(|&s| s != map.ignore_id()).collect();
    let ps = segments(pred, &keep, map);
    let gs = segments(gt, &keep, map);

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in ps.iter().enumerate() {
        for (j, g) in gs.iter().enumerate() {
            if p.class == g.class {
                pairs.push((iou(p, g), i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut p_used = vec![false; ps.len()];
    let mut g_used = vec![false; gs.len()];
    let mut tps: Vec<(u32, u32, f64)> = Vec::new();
    for (v, i, j) in pairs {
        if v > 0.5 && !p_used[i] && !g_used[j] {
            p_used[i] = true;
            g_used[j] = true;
            tps.push((gs[j].class, gs[j].instance, v));
        }
    }
    tps.sort_by_key(|t| (t.0, t.1));

    let mut classes: Vec<u32> = ps
        .iter()
        .map(|s| s.class)
        .chain(gs.iter().map(|s| s.class))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::new();
    for &c in &classes {
        let mut iou_sum = 0.0;
        let mut tp = 0;
        for t in tps.iter().filter(|t| t.0 == c) {
            iou_sum += t.2;
            tp += 1;
        }
        let fp = ps
            .iter()
            .zip(&p_used)
            .filter(|(s, &u)| s.class == c && !u)
            .count();
        let fn_ = gs
            .iter()
            .zip(&g_used)
            .filter(|(s, &u)| s.class == c && !u)
            .count();
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
        let rq = tp as f64 / denom;
        let sem = |labels: &LabelSet, i: usize| keep[i] && labels.semantic[i] == c;
        let inter = (0..gt.len())
            .filter(|&i| sem(pred, i) && sem(gt, i))
            .count();
        let union = (0..gt.len())
            .filter(|&i| sem(pred, i) || sem(gt, i))
            .count();
        per_class.push(ClassReport {
            class_id: c,
            name: map.name_of(c).to_string(),
            thing: map.is_thing(c),
            pq: sq * rq,
            sq,
            rq,
            iou: (union > 0).then(|| inter as f64 / union as f64),
            tp,
            fp,
            fn_,
        });
    }

    let col = |thing: Option<bool>, f: fn(&ClassReport) -> f64| -> f64 {
        let v: Vec<f64> = per_class
            .iter()
            .filter(|r| thing.is_none_or(|t| r.thing == t))
            .map(f)
            .collect();
        mean(&v)
    };
    let mut ious = Vec::new();
    for c in 0..map.classes.len() as u32 {
        if c == map.ignore_id() || !(0..gt.len()).any(|i| gt.semantic[i] == c) {
            continue;
        }
        let inter = (0..gt.len())
            .filter(|&i| keep[i] && pred.semantic[i] == c && gt.semantic[i] == c)
            .count();
        let union = (0..gt.len())
            .filter(|&i| keep[i] && (pred.semantic[i] == c || gt.semantic[i] == c))
            .count();
        ious.push(inter as f64 / union as f64);
    }
    let dagger: Vec<f64> = per_class
        .iter()
        .map(|r| if r.thing { r.pq } else { r.iou.unwrap_or(0.0) })
        .collect();
    Ok(EvalReport {
        pq: col(None, |r| r.pq),
        pq_dagger: mean(&dagger),
        sq: col(None, |r| r.sq),
        rq: col(None, |r| r.rq),
        pq_th: col(Some(true), |r| r.pq),
        sq_th: col(Some(true), |r| r.sq),
        rq_th: col(Some(true), |r| r.rq),
        pq_st: col(Some(false), |r| r.pq),
        sq_st: col(Some(false), |r| r.sq),
        rq_st: col(Some(false), |r| r.rq),
        miou: mean(&ious),
        tp: per_class.iter().map(|r| r.tp).sum(),
        fp: per_class.iter().map(|r| r.fp).sum(),
        fn_: per_class.iter().map(|r| r.fn_).sum(),
        per_class,
        border_iou: Default::default(),
    })
}
