//! Regularized pseudo-label generation: a precision-oriented grid search
//! over inference-time control parameters and small-instance filtering.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{panoptic_fusion, BBox, FusionConfig, InstancePrediction};
use crate::io::{self, ClassMap, LabelSet, PointCloud};
use crate::kernels::softmax_channelwise;
use crate::metrics::EvalReport;
use crate::projection::{backproject_knn, project, BackprojectConfig, ProjectionConfig};
use crate::tensor::Tensor;
use crate::train::{Model, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    pub o_t: f64,
    pub min_sa: usize,
    pub c_t: f64,
    pub softmax_threshold: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub proposals: usize,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            o_t: 0.5,
            min_sa: 128,
            c_t: 0.5,
            softmax_threshold: 0.5,
            nms_iou: 0.5,
            score_threshold: 0.05,
            proposals: 100,
        }
    }
}

impl ControlParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("o_t", self.o_t),
            ("c_t", self.c_t),
            ("softmax_threshold", self.softmax_threshold),
            ("nms_iou", self.nms_iou),
            ("score_threshold", self.score_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(
                    "control_params",
                    format!("{name} = {v} outside [0, 1]"),
                ));
            }
        }
        if self.proposals == 0 {
            return Err(Error::invalid(
                "control_params",
                "proposals must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            c_t: self.c_t,
            o_t: self.o_t,
            min_sa: self.min_sa,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("control params serialize");
        hex::encode(Sha256::digest(json))
    }
}

/// Value lists per parameter; omitted parameters keep their default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub o_t: Vec<f64>,
    #[serde(default)]
    pub min_sa: Vec<usize>,
    #[serde(default)]
    pub c_t: Vec<f64>,
    #[serde(default)]
    pub softmax_threshold: Vec<f64>,
    #[serde(default)]
    pub nms_iou: Vec<f64>,
    #[serde(default)]
    pub score_threshold: Vec<f64>,
    #[serde(default)]
    pub proposals: Vec<usize>,
}

impl GridSpec {
    fn extents(&self) -> [usize; 7] {
        [
            self.o_t.len(),
            self.min_sa.len(),
            self.c_t.len(),
            self.softmax_threshold.len(),
            self.nms_iou.len(),
            self.score_threshold.len(),
            self.proposals.len(),
        ]
        .map(|n| n.max(1))
    }

    pub fn len(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid point `index` in row-major order (the last parameter varies
    /// fastest).
    pub fn get(&self, mut index: usize) -> Option<ControlParams> {
        if index >= self.len() {
            return None;
        }
        let ext = self.extents();
        let mut digit = [0usize; 7];
        for k in (0..7).rev() {
            digit[k] = index % ext[k];
            index /= ext[k];
        }
        let d = ControlParams::default();
        fn pick<V: Copy>(v: &[V], i: usize, default: V) -> V {
            v.get(i).copied().unwrap_or(default)
        }
        Some(ControlParams {
            o_t: pick(&self.o_t, digit[0], d.o_t),
            min_sa: pick(&self.min_sa, digit[1], d.min_sa),
            c_t: pick(&self.c_t, digit[2], d.c_t),
            softmax_threshold: pick(&self.softmax_threshold, digit[3], d.softmax_threshold),
            nms_iou: pick(&self.nms_iou, digit[4], d.nms_iou),
            score_threshold: pick(&self.score_threshold, digit[5], d.score_threshold),
            proposals: pick(&self.proposals, digit[6], d.proposals),
        })
    }

    /// The Cartesian product, generated lazily.
    pub fn iter(&self) -> impl Iterator<Item = ControlParams> + '_ {
        (0..self.len()).map(|i| self.get(i).expect("index in range"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlgConfig {
    pub pq_cutoff: f64,
    pub p_limit: usize,
}

impl PlgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pq_cutoff) {
            return Err(Error::invalid(
                "plg_config",
                format!("pq_cutoff {} outside [0, 1]", self.pq_cutoff),
            ));
        }
        Ok(())
    }
}

/// What the search needs from one validation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlScore {
    pub tp: u64,
    pub fp: u64,
    pub pq: f64,
}

impl ControlScore {
    /// TP and FP summed over thing classes, with the overall PQ.
    pub fn from_report(report: &EvalReport) -> Self {
        let things = report.per_class.iter().filter(|c| c.thing);
        let (tp, fp) = things.fold((0, 0), |(tp, fp), c| (tp + c.tp as u64, fp + c.fp as u64));
        ControlScore {
            tp,
            fp,
            pq: report.pq,
        }
    }

    /// `(TP - FP) / TP`; `None` when TP is zero.
    pub fn ratio(&self) -> Option<f64> {
        (self.tp > 0).then(|| (self.tp as f64 - self.fp as f64) / self.tp as f64)
    }
}

/// Exact comparison of `(TP - FP) / TP` by cross-multiplication.
fn cmp_ratio(a: &ControlScore, b: &ControlScore) -> Ordering {
    let lhs = (a.tp as i128 - a.fp as i128) * b.tp as i128;
    let rhs = (b.tp as i128 - b.fp as i128) * a.tp as i128;
    lhs.cmp(&rhs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub index: usize,
    pub params: ControlParams,
    pub score: ControlScore,
}

/// Picks, among points with `PQ >= pq_cutoff` and `TP > 0`, the one with
/// the largest `(TP - FP) / TP`; ties go to higher PQ, then the earlier point.
pub fn select_control(
    results: &[(ControlParams, ControlScore)],
    cfg: &PlgConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    if results.is_empty() {
        return Err(Error::invalid("grid_search_control", "empty grid"));
    }
    let mut best: Option<usize> = None;
    for (i, (_, s)) in results.iter().enumerate() {
        if s.pq < cfg.pq_cutoff || s.tp == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let bs = &results[b].1;
                match cmp_ratio(s, bs) {
                    Ordering::Greater => true,
                    Ordering::Equal => s.pq > bs.pq,
                    Ordering::Less => false,
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    match best {
        Some(i) => Ok(SearchResult {
            index: i,
            params: results[i].0,
            score: results[i].1,
        }),
        None => Err(Error::Infeasible {
            best_pq: results
                .iter()
                .map(|r| r.1.pq)
                .fold(f64::NEG_INFINITY, f64::max),
            cutoff: cfg.pq_cutoff,
        }),
    }
}

/// Evaluates every grid point in order and selects with [`select_control`].
pub fn grid_search_control<I, F>(grid: I, mut evaluate: F, cfg: &PlgConfig) -> Result<SearchResult>
where
    I: IntoIterator<Item = ControlParams>,
    F: FnMut(&ControlParams) -> Result<ControlScore>,
{
    let results = grid
        .into_iter()
        .map(|p| Ok((p, evaluate(&p)?)))
        .collect::<Result<Vec<_>>>()?;
    select_control(&results, cfg)
}

/// Relabels every instance with fewer than `p_limit` points to the ignore
/// class, clearing both ids.
pub fn filter_small_instances(labels: &LabelSet, p_limit: usize, ignore_id: u32) -> LabelSet {
    let sizes = labels.instance_sizes();
    let mut out = labels.clone();
    for i in 0..out.len() {
        let key = (out.semantic[i], out.instance[i]);
        if key.1 != 0 && sizes[&key] < p_limit {
            out.semantic[i] = ignore_id;
            out.instance[i] = 0;
        }
    }
    out
}

/// Produces panoptic point labels for a scan under given control parameters.
pub trait PseudoLabeler {
    fn label(&mut self, scan: &PointCloud, params: &ControlParams) -> Result<LabelSet>;
}

impl<F: FnMut(&PointCloud, &ControlParams) -> Result<LabelSet>> PseudoLabeler for F {
    fn label(&mut self, scan: &PointCloud, params: &ControlParams) -> Result<LabelSet> {
        self(scan, params)
    }
}

fn log_odds(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Instance proposals from a semantic prediction: 4-connected components of
/// pixels whose argmax is a thing class with probability at least
/// `softmax_threshold`. A proposal's score is the mean class probability
/// over its component and its mask logits are the class log-odds relative
/// to the threshold on the component, negative elsewhere in the box.
/// Proposals below `score_threshold` are dropped; at most `proposals` are
/// kept, highest score first.
pub fn component_proposals(
    logits: &Tensor<f32>,
    map: &ClassMap,
    params: &ControlParams,
) -> Result<Vec<InstancePrediction>> {
    let (c, h, w) = logits.chw("component_proposals")?;
    if c != map.num_classes() {
        return Err(Error::shape(
            "component_proposals",
            &[map.num_classes(), h, w],
            logits.shape(),
        ));
    }
    let probs = softmax_channelwise(logits)?;
    let (n, pd) = (h * w, probs.data());
    let best: Vec<usize> = (0..n)
        .map(|p| (1..c).fold(0, |b, k| if pd[k * n + p] > pd[b * n + p] { k } else { b }))
        .collect();
    let t = params.softmax_threshold as f32;
    let fg = |p: usize| map.is_thing(map.class_of_channel(best[p])) && pd[best[p] * n + p] >= t;
    let mut comp = vec![usize::MAX; n];
    let mut out: Vec<InstancePrediction> = Vec::new();
    let mut id = 0;
    for start in 0..n {
        if comp[start] != usize::MAX || !fg(start) {
            continue;
        }
        let ch = best[start];
        let (mut stack, mut pixels) = (vec![start], Vec::new());
        comp[start] = id;
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (r, col) = (p / w, p % w);
            let neighbours = [
                (r > 0).then(|| p - w),
                (r + 1 < h).then(|| p + w),
                (col > 0).then(|| p - 1),
                (col + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if comp[q] == usize::MAX && best[q] == ch && fg(q) {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        let score =
            pixels.iter().map(|&p| pd[ch * n + p] as f64).sum::<f64>() / pixels.len() as f64;
        if score >= params.score_threshold {
            let (r0, r1) = pixels
                .iter()
                .fold((h, 0), |(a, b), &p| (a.min(p / w), b.max(p / w)));
            let (c0, c1) = pixels
                .iter()
                .fold((w, 0), |(a, b), &p| (a.min(p % w), b.max(p % w)));
            let bbox = BBox::new(r0, c0, r1 + 1, c1 + 1);
            let (bh, bw) = (bbox.height(), bbox.width());
            let gap = log_odds(t);
            let mask_logits = Tensor::from_fn(&[bh, bw], |i| {
                let p = (r0 + i / bw) * w + c0 + i % bw;
                let v = log_odds(pd[ch * n + p]) - gap;
                if comp[p] == id {
                    v.max(1e-3)
                } else {
                    -v.abs().max(1e-3)
                }
            });
            out.push(InstancePrediction {
                class_id: map.class_of_channel(ch),
                score,
                bbox,
                mask_logits,
            });
        }
        id += 1;
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    out.truncate(params.proposals);
    Ok(out)
}

/// Labels scans with a trained semantic model: projection, network
/// logits, component proposals, panoptic fusion under the control
/// parameters and kNN back-projection to the points.
#[derive(Clone, Copy, Debug)]
pub struct ModelLabeler<'a> {
    pub model: &'a Model,
    pub map: &'a ClassMap,
    pub projection: ProjectionConfig,
    pub backproject: BackprojectConfig,
}

impl ModelLabeler<'_> {
    pub fn label_scan(&self, cloud: &PointCloud, params: &ControlParams) -> Result<LabelSet> {
        params.validate()?;
        let (kh, kw) = self.model.net.cfg.proximity_kernel;
        let scene = Scene::from_projection(project(cloud, None, &self.projection)?, kh * kw)?;
        let logits = self.model.logits(&scene)?;
        let proposals = component_proposals(&logits, self.map, params)?;
        let fused = panoptic_fusion(&logits, &proposals, self.map, &params.fusion())?;
        backproject_knn(
            &fused.canonical.panoptic,
            &scene.image,
            cloud,
            &self.backproject,
        )
    }
}

impl PseudoLabeler for ModelLabeler<'_> {
    fn label(&mut self, scan: &PointCloud, params: &ControlParams) -> Result<LabelSet> {
        self.label_scan(scan, params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub instances_before: usize,
    pub instances_after: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: ControlParams,
    pub fingerprint: String,
    pub p_limit: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Labels every scan with `params`, filters small instances and writes
/// `<stem>.label` files plus `manifest.json` to `out_dir`. A scan that
/// cannot be read or labeled is recorded with its error and skipped.
pub fn generate_pseudo_labels(
    labeler: &mut dyn PseudoLabeler,
    scans: &[PathBuf],
    params: &ControlParams,
    cfg: &PlgConfig,
    ignore_id: u32,
    out_dir: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(scans.len());
    for scan in scans {
        let outcome = io::load_scan(scan).and_then(|cloud| labeler.label(&cloud, params));
        let entry = match outcome {
            Ok(labels) => {
                let filtered = filter_small_instances(&labels, cfg.p_limit, ignore_id);
                let stem = scan
                    .file_stem()
                    .map_or_else(|| "scan".into(), |s| s.to_string_lossy().into_owned());
                let path = out_dir.join(format!("{stem}.label"));
                io::save_labels(&path, &filtered)?;
                ManifestEntry {
                    scan: scan.clone(),
                    labels: Some(path),
                    instances_before: labels.instance_sizes().len(),
                    instances_after: filtered.instance_sizes().len(),
                    error: None,
                }
            }
            Err(e) => ManifestEntry {
                scan: scan.clone(),
                labels: None,
                instances_before: 0,
                instances_after: 0,
                error: Some(e.to_string()),
            },
        };
        entries.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        params: *params,
        fingerprint: params.fingerprint(),
        p_limit: cfg.p_limit,
        entries,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
