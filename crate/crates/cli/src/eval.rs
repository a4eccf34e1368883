use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use lidarpan::io::{self, ClassMap, LabelSet, PanopticMap};
use lidarpan::metrics::{border_counts, match_segments, panoptic_scores, EvalReport, SegmentMatch};
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{emit, emit_json};
use crate::config::{load_class_map, RunConfig, Split};
use crate::error::{AtPath, CliError, CliResult};
use crate::files::{self, FORMAT_VERSION};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predictions, one file per ground-truth file with the same name.
    #[arg(long = "pred-dir")]
    pub pred_dir: PathBuf,
    /// Directory of ground truth: point labels (.label) or 2D panoptic maps (.plm).
    #[arg(long = "gt-dir")]
    pub gt_dir: PathBuf,
    /// Class-map preset name or JSON path; overrides the config.
    #[arg(long = "class-map")]
    pub class_map: Option<String>,
    /// Classes listed in the per-class table and JSON.
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Border band width for border IoU (2D maps only).
    #[arg(long = "border-width")]
    pub border_width: Option<usize>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Output<'a> {
    version: u32,
    split: Split,
    files: usize,
    report: &'a EvalReport,
}

enum Pair {
    Points(LabelSet, LabelSet),
    Maps(PanopticMap, PanopticMap),
}

fn ground_truth_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::data(dir, e.to_string()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::data(dir, e.to_string()))?
            .path();
        if matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("label" | "plm")
        ) {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(CliError::data(dir, "no .label or .plm files"));
    }
    files.sort();
    Ok(files)
}

fn load_pair(gt: &Path, pred: &Path) -> CliResult<Pair> {
    if gt.extension().is_some_and(|e| e == "plm") {
        Ok(Pair::Maps(
            PanopticMap::load(pred).at(pred)?,
            PanopticMap::load(gt).at(gt)?,
        ))
    } else {
        Ok(Pair::Points(
            io::load_labels(pred).at(pred)?,
            io::load_labels(gt).at(gt)?,
        ))
    }
}

type Counts = BTreeMap<u32, (u64, u64)>;

fn score_pair(
    gt: &Path,
    pred: &Path,
    map: &ClassMap,
    border: Option<usize>,
) -> CliResult<(SegmentMatch, Counts)> {
    let pair = load_pair(gt, pred)?;
    let (p, g, counts) = match pair {
        Pair::Points(p, g) => {
            if border.is_some() {
                return Err(
                    CliError::validation("--border-width needs 2D panoptic maps (.plm)").at(gt),
                );
            }
            (p, g, Counts::new())
        }
        Pair::Maps(p, g) => {
            if (p.height, p.width) != (g.height, g.width) {
                let msg = format!(
                    "prediction is {}x{}, ground truth {}x{}",
                    p.height, p.width, g.height, g.width
                );
                return Err(CliError::data(pred, msg));
            }
            let counts = match border {
                Some(w) => border_counts(&p, &g, w, map, None)?,
                None => Counts::new(),
            };
            (p.as_label_set(), g.as_label_set(), counts)
        }
    };
    if p.len() != g.len() {
        return Err(CliError::data(
            pred,
            format!(
                "{} predicted labels for {} ground-truth labels",
                p.len(),
                g.len()
            ),
        ));
    }
    Ok((match_segments(&p, &g, map)?, counts))
}

/// Scores every ground-truth file against its prediction; results are
/// reduced in path order.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    map: &ClassMap,
    border: Option<usize>,
) -> CliResult<(EvalReport, usize)> {
    let gts = ground_truth_files(gt_dir)?;
    let results = gts
        .par_iter()
        .map(|gt| {
            score_pair(
                gt,
                &pred_dir.join(gt.file_name().expect("listed file has a name")),
                map,
                border,
            )
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut merged = SegmentMatch::default();
    let mut band = Counts::new();
    for (m, counts) in &results {
        merged.merge(m);
        for (c, (i, u)) in counts {
            let e = band.entry(*c).or_default();
            e.0 += i;
            e.1 += u;
        }
    }
    let mut report = panoptic_scores(&merged, map);
    report.border_iou = band
        .into_iter()
        .filter(|(_, (_, u))| *u > 0)
        .map(|(c, (i, u))| (c, i as f64 / u as f64))
        .collect();
    Ok((report, gts.len()))
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Aligned plain-text summary: headline columns, then one row per class.
pub fn table(report: &EvalReport) -> String {
    let head = [
        "PQ", "PQ†", "SQ", "RQ", "PQTh", "SQTh", "RQTh", "PQSt", "SQSt", "RQSt", "mIoU",
    ];
    let vals = [
        report.pq,
        report.pq_dagger,
        report.sq,
        report.rq,
        report.pq_th,
        report.sq_th,
        report.rq_th,
        report.pq_st,
        report.sq_st,
        report.rq_st,
        report.miou,
    ];
    let mut lines = vec![
        head.iter().map(|h| format!("{h:>6}")).collect::<String>(),
        vals.iter()
            .map(|&v| format!("{:>6}", pct(v)))
            .collect::<String>(),
        String::new(),
    ];
    let width = report
        .per_class
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    lines.push(format!(
        "{:<width$} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
        "class", "kind", "PQ", "SQ", "RQ", "IoU", "TP", "FP", "FN"
    ));
    for c in &report.per_class {
        lines.push(format!(
            "{:<width$} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}",
            c.name,
            if c.thing { "thing" } else { "stuff" },
            pct(c.pq),
            pct(c.sq),
            pct(c.rq),
            c.iou.map_or_else(|| "-".to_string(), pct),
            c.tp,
            c.fp,
            c.fn_
        ));
    }
    for (c, v) in &report.border_iou {
        lines.push(format!("border IoU {c}: {}", pct(*v)));
    }
    lines.join("\n")
}

pub fn run(a: &EvalArgs, cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    let map = match &a.class_map {
        Some(source) => load_class_map(source)?,
        None => cfg.class_map()?,
    };
    let split = a.split.unwrap_or(cfg.metrics.split);
    let border = a.border_width.or(cfg.metrics.border_width);
    if border == Some(0) {
        return Err(CliError::validation("--border-width must be at least 1"));
    }
    let (mut report, files) = evaluate_dirs(&a.pred_dir, &a.gt_dir, &map, border)?;
    report.per_class.retain(|c| match split {
        Split::All => true,
        Split::Stuff => !c.thing,
        Split::Thing => c.thing,
    });
    let output = Output {
        version: FORMAT_VERSION,
        split,
        files,
        report: &report,
    };
    match &a.out {
        Some(path) => files::write_json(path, &output)?,
        None => {
            emit_json(out, &output)?;
            emit(out, "")?;
        }
    }
    emit(out, &table(&report))
}
