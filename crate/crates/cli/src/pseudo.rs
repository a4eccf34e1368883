use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use lidarpan::io::{self, ClassMap, LabelSet, PointCloud};
use lidarpan::metrics::{match_segments, panoptic_scores, SegmentMatch};
use lidarpan::pseudo::{
    generate_pseudo_labels, select_control, ControlParams, ControlScore, GridSpec, ModelLabeler,
    PlgConfig,
};
use lidarpan::snapshot;
use lidarpan::train::Model;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::emit_json;
use crate::config::RunConfig;
use crate::error::{AtPath, CliError, CliResult};
use crate::files::{self, FORMAT_VERSION};

#[derive(Debug, Args)]
pub struct PseudoArgs {
    /// Directory of unlabeled scans (.bin).
    #[arg(long)]
    pub scans: PathBuf,
    /// Parameter snapshot of the semantic network.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Grid JSON of per-parameter value lists; omitted keeps the configured fusion values.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Minimum validation PQ of a feasible grid point.
    #[arg(long = "pq-cutoff", default_value_t = 0.5)]
    pub pq_cutoff: f64,
    /// Instances with fewer points become unlabeled.
    #[arg(long = "p-limit", default_value_t = 15)]
    pub p_limit: usize,
    /// Validation directory of scans (.bin) with labels (.label, learning ids) of the same stem.
    #[arg(long = "val-gt")]
    pub val_gt: Option<PathBuf>,
    /// Output directory for .label files, manifest.json and search.json.
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct GridPoint {
    params: ControlParams,
    score: ControlScore,
}

#[derive(Debug, Serialize)]
struct SearchLog {
    version: u32,
    pq_cutoff: f64,
    selected: usize,
    points: Vec<GridPoint>,
}

fn scans_in(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::data(dir, e.to_string()))?;
    let mut scans = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::data(dir, e.to_string()))?
            .path();
        if path.extension().is_some_and(|e| e == "bin") {
            scans.push(path);
        }
    }
    scans.sort();
    Ok(scans)
}

fn validation_set(dir: &Path) -> CliResult<Vec<(PointCloud, LabelSet)>> {
    let scans = scans_in(dir)?;
    if scans.is_empty() {
        return Err(CliError::data(dir, "no validation scans (.bin)"));
    }
    scans
        .par_iter()
        .map(|scan| {
            let label = scan.with_extension("label");
            let cloud = io::load_scan(scan).at(scan)?;
            let gt = io::load_labels(&label).at(&label)?;
            if gt.len() != cloud.len() {
                return Err(CliError::data(
                    &label,
                    format!("{} labels for {} points", gt.len(), cloud.len()),
                ));
            }
            Ok((cloud, gt))
        })
        .collect()
}

fn score(
    labeler: &ModelLabeler<'_>,
    val: &[(PointCloud, LabelSet)],
    params: &ControlParams,
    map: &ClassMap,
) -> CliResult<ControlScore> {
    let mut merged = SegmentMatch::default();
    for (cloud, gt) in val {
        let pred = labeler.label_scan(cloud, params)?;
        merged.merge(&match_segments(&pred, gt, map)?);
    }
    Ok(ControlScore::from_report(&panoptic_scores(&merged, map)))
}

pub fn run(a: &PseudoArgs, cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    let plg = PlgConfig {
        pq_cutoff: a.pq_cutoff,
        p_limit: a.p_limit,
    };
    plg.validate()?;
    let map = cfg.class_map()?;
    let mut model = Model::new(cfg.head(&map), cfg.seed);
    snapshot::load_into(&mut model.store, &a.checkpoint).at(&a.checkpoint)?;
    let backproject = lidarpan::projection::BackprojectConfig {
        ignore_id: map.ignore_id(),
        ..cfg.backproject
    };
    let mut labeler = ModelLabeler {
        model: &model,
        map: &map,
        projection: cfg.projection,
        backproject,
    };

    let (params, selected) = match &a.grid {
        Some(grid_path) => {
            let val_dir = a
                .val_gt
                .as_ref()
                .ok_or_else(|| CliError::validation("--grid needs --val-gt for the search"))?;
            let grid: GridSpec = files::read_json(grid_path)?;
            let points: Vec<ControlParams> = grid.iter().collect();
            if points.is_empty() {
                return Err(CliError::validation("the grid is empty").at(grid_path));
            }
            for p in &points {
                p.validate().at(grid_path)?;
            }
            let val = validation_set(val_dir)?;
            let scores = points
                .par_iter()
                .map(|p| score(&labeler, &val, p, &map))
                .collect::<CliResult<Vec<_>>>()?;
            let results: Vec<(ControlParams, ControlScore)> =
                points.iter().copied().zip(scores).collect();
            let best = select_control(&results, &plg)?;
            let log = SearchLog {
                version: FORMAT_VERSION,
                pq_cutoff: plg.pq_cutoff,
                selected: best.index,
                points: results
                    .into_iter()
                    .map(|(params, score)| GridPoint { params, score })
                    .collect(),
            };
            files::write_json(&a.out_dir.join("search.json"), &log)?;
            (best.params, Some(best.index))
        }
        None => {
            let params = ControlParams {
                o_t: cfg.fusion.o_t,
                c_t: cfg.fusion.c_t,
                min_sa: cfg.fusion.min_sa,
                ..ControlParams::default()
            };
            (params, None)
        }
    };

    let scans = scans_in(&a.scans)?;
    let manifest = generate_pseudo_labels(
        &mut labeler,
        &scans,
        &params,
        &plg,
        map.ignore_id(),
        &a.out_dir,
    )?;
    let failed = manifest
        .entries
        .iter()
        .filter(|e| e.error.is_some())
        .count();
    emit_json(
        out,
        &serde_json::json!({
            "version": FORMAT_VERSION,
            "params": params,
            "fingerprint": manifest.fingerprint,
            "selected": selected,
            "scans": manifest.entries.len(),
            "failed": failed,
            "manifest": a.out_dir.join("manifest.json"),
        }),
    )
}
