use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use lidarpan::fusion::{panoptic_fusion, FusionConfig};
use lidarpan::gradsuite::{run_operator, SuiteConfig, OPERATORS};
use lidarpan::io::{self, remap_and_filter, PanopticMap, SmallInstancePolicy};
use lidarpan::projection::{self, backproject_knn, ProjectionConfig};
use lidarpan::snapshot;
use lidarpan::train::{synthetic_scenes, train_model, Model, Scene, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{AtPath, CliError, CliResult};
use crate::files::{self, FORMAT_VERSION};

pub fn emit(out: &mut impl Write, line: &str) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::validation(format!("stdout: {e}")))
}

pub fn emit_json(out: &mut impl Write, value: &impl Serialize) -> CliResult<()> {
    emit(
        out,
        &serde_json::to_string(value).expect("summary serializes"),
    )
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(a)?, num(b)?))
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Input scan (.bin, f32 x y z intensity).
    #[arg(long)]
    pub scan: PathBuf,
    /// Point labels (.label) to project alongside the scan.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Map raw label ids to learning ids with the configured class map.
    #[arg(long, requires = "labels")]
    pub remap: bool,
    /// Image width in columns.
    #[arg(long)]
    pub width: Option<usize>,
    /// Fixed row count (default: derived from the scan).
    #[arg(long)]
    pub rows: Option<usize>,
    /// Yaw jump in degrees that starts a new row.
    #[arg(long = "threshold-deg")]
    pub threshold_deg: Option<f64>,
    /// Output directory: channels.f32, image.json and labels.plm.
    #[arg(long)]
    pub out: PathBuf,
}

fn projection_config(a: &ProjectArgs, cfg: &RunConfig) -> CliResult<ProjectionConfig> {
    let mut p = cfg.projection;
    if let Some(w) = a.width {
        p.width = w;
    }
    if a.rows.is_some() {
        p.rows = a.rows;
    }
    if let Some(t) = a.threshold_deg {
        p.yaw_jump_threshold_deg = t;
    }
    p.validate()?;
    Ok(p)
}

pub fn project(a: &ProjectArgs, cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    let pcfg = projection_config(a, cfg)?;
    let cloud = io::load_scan(&a.scan).at(&a.scan)?;
    let labels = match &a.labels {
        Some(path) => {
            let raw = io::load_labels(path).at(path)?;
            Some(if a.remap {
                remap_and_filter(&raw, &cfg.class_map()?, SmallInstancePolicy::default())
                    .at(path)?
            } else {
                raw
            })
        }
        None => None,
    };
    let p = projection::project(&cloud, labels.as_ref(), &pcfg).at(&a.scan)?;
    let image = files::save_image(&a.out, &p.image)?;
    let label_path = match &p.labels {
        Some(map) => {
            let path = a.out.join("labels.plm");
            map.save(&path).at(&path)?;
            Some(path)
        }
        None => None,
    };
    emit_json(
        out,
        &json!({
            "version": FORMAT_VERSION,
            "image": image,
            "labels": label_path,
            "height": p.image.height,
            "width": p.image.width,
            "points": cloud.len(),
            "valid_pixels": p.image.num_valid(),
        }),
    )
}

#[derive(Debug, Args)]
pub struct BackprojectArgs {
    /// Predicted 2D panoptic map (.plm).
    #[arg(long)]
    pub pred2d: PathBuf,
    /// Range image sidecar written by `project` (image.json).
    #[arg(long)]
    pub image: PathBuf,
    /// The scan the image was projected from (.bin).
    #[arg(long)]
    pub scan: PathBuf,
    /// Number of voting neighbours.
    #[arg(long)]
    pub k: Option<usize>,
    /// Search window as ROWSxCOLS, both odd.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<(usize, usize)>,
    /// Output point labels (.label).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn backproject(a: &BackprojectArgs, cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    let mut bcfg = cfg.backproject;
    bcfg.k = a.k.unwrap_or(bcfg.k);
    bcfg.window = a.window.unwrap_or(bcfg.window);
    bcfg.validate()?;
    let pred = PanopticMap::load(&a.pred2d).at(&a.pred2d)?;
    let img = files::load_image(&a.image)?;
    let cloud = io::load_scan(&a.scan).at(&a.scan)?;
    let labels = backproject_knn(&pred, &img, &cloud, &bcfg)?;
    io::save_labels(&a.out, &labels).at(&a.out)?;
    emit_json(
        out,
        &json!({ "version": FORMAT_VERSION, "labels": a.out, "points": labels.len() }),
    )
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Semantic logits descriptor (JSON with shape and a raw f32 file), shape (C, H, W).
    #[arg(long = "semantic-logits")]
    pub semantic_logits: PathBuf,
    /// Instances JSON: version and a list of {class_id, score, bbox, mask}.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Confidence threshold c_t.
    #[arg(long = "c-t")]
    pub c_t: Option<f64>,
    /// Overlap threshold o_t.
    #[arg(long = "o-t")]
    pub o_t: Option<f64>,
    /// Minimum stuff area min_sa in pixels.
    #[arg(long = "min-sa")]
    pub min_sa: Option<usize>,
    /// Output panoptic map (.plm).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fuse(a: &FuseArgs, cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    let fcfg = FusionConfig {
        c_t: a.c_t.unwrap_or(cfg.fusion.c_t),
        o_t: a.o_t.unwrap_or(cfg.fusion.o_t),
        min_sa: a.min_sa.unwrap_or(cfg.fusion.min_sa),
    };
    fcfg.validate()?;
    let map = cfg.class_map()?;
    let sem = files::load_tensor(&a.semantic_logits)?;
    let (h, w) = match sem.shape() {
        [_, h, w] => (*h, *w),
        s => {
            return Err(CliError::data(
                &a.semantic_logits,
                format!("expected (C, H, W) logits, got shape {s:?}"),
            ))
        }
    };
    let instances = match &a.instances {
        Some(path) => files::load_instances(path, h, w)?,
        None => Vec::new(),
    };
    let fused = panoptic_fusion(&sem, &instances, &map, &fcfg)?;
    fused.canonical.panoptic.save(&a.out).at(&a.out)?;
    let segments = fused
        .canonical
        .panoptic
        .instance
        .iter()
        .copied()
        .max()
        .unwrap_or(0);
    emit_json(
        out,
        &json!({
            "version": FORMAT_VERSION,
            "panoptic": a.out,
            "instances_in": instances.len(),
            "instances_kept": fused.kept.len(),
            "instance_ids": segments,
        }),
    )
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Number of fixed synthetic scenes.
    #[arg(long, default_value_t = TrainConfig::default().scenes)]
    pub scenes: usize,
    /// SGD steps.
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    /// Learning rate.
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    pub momentum: f64,
    /// Scene height in rows (multiple of 32).
    #[arg(long, default_value_t = TrainConfig::default().rows)]
    pub rows: usize,
    /// Scene width in columns (multiple of 32).
    #[arg(long, default_value_t = TrainConfig::default().width)]
    pub width: usize,
    /// Write the trained parameters to this snapshot file.
    #[arg(long = "checkpoint-out")]
    pub checkpoint_out: Option<PathBuf>,
    /// Pseudo-labeled scans (.bin with .label of the same stem) fitted first.
    #[arg(long = "pretrain-dir", requires = "pretrain_steps")]
    pub pretrain_dir: Option<PathBuf>,
    /// Steps of the first phase on the pretraining scans.
    #[arg(long = "pretrain-steps", requires = "pretrain_dir")]
    pub pretrain_steps: Option<usize>,
}

fn pretrain_scenes(dir: &Path, pcfg: &ProjectionConfig, k: usize) -> CliResult<Vec<Scene>> {
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
    if scans.is_empty() {
        return Err(CliError::data(dir, "no pretraining scans (.bin)"));
    }
    scans.sort();
    scans
        .par_iter()
        .map(|scan| {
            let label = scan.with_extension("label");
            let cloud = io::load_scan(scan).at(scan)?;
            let labels = io::load_labels(&label).at(&label)?;
            let p = projection::project(&cloud, Some(&labels), pcfg).at(scan)?;
            Scene::from_projection(p, k).at(scan)
        })
        .collect()
}

pub fn train_toy(a: &TrainArgs, cfg: &RunConfig, out: &mut impl Write) -> CliResult<()> {
    if a.scenes == 0 {
        return Err(CliError::validation("--scenes must be at least 1"));
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.momentum) {
        return Err(CliError::validation(
            "--lr must be positive and --momentum in [0, 1)",
        ));
    }
    let tcfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        momentum: a.momentum,
        seed: cfg.seed,
        scenes: a.scenes,
        rows: a.rows,
        width: a.width,
    };
    let map = cfg.class_map()?;
    let head = cfg.head(&map);
    let k = head.proximity_kernel.0 * head.proximity_kernel.1;
    let mut model = Model::new(head, cfg.seed);
    emit(out, &format!("# lidarpan train-toy loss v{FORMAT_VERSION}"))?;
    emit(out, "phase,step,loss")?;
    if let (Some(dir), Some(steps)) = (&a.pretrain_dir, a.pretrain_steps) {
        let pcfg = ProjectionConfig {
            width: a.width,
            rows: Some(a.rows),
            ..cfg.projection
        };
        let scenes = pretrain_scenes(dir, &pcfg, k)?;
        for step in 0..steps {
            let loss = model.sgd_step(&scenes, &map, a.lr, a.momentum)?;
            emit(out, &format!("pretrain,{},{loss:.6}", step + 1))?;
        }
    }
    let scenes = synthetic_scenes(tcfg.scenes, tcfg.rows, tcfg.width, tcfg.seed, k)?;
    let mut write_err = None;
    let (model, outcome) = train_model(model, &scenes, &tcfg, &map, None, |step, loss| {
        if write_err.is_none() {
            write_err = emit(out, &format!("train,{},{loss:.6}", step + 1)).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    emit(out, &format!("# accuracy,{:.6}", outcome.accuracy))?;
    if let Some(path) = &a.checkpoint_out {
        snapshot::save(&model.store, path).at(path)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds per operator.
    #[arg(long, default_value_t = SuiteConfig::default().seeds)]
    pub seeds: usize,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = SuiteConfig::default().tolerance)]
    pub tolerance: f64,
    /// Restrict the run to these operators (repeatable).
    #[arg(long = "operator", value_parser = clap::builder::PossibleValuesParser::new(OPERATORS))]
    pub operators: Vec<String>,
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> CliResult<()> {
    let cfg = SuiteConfig {
        seeds: a.seeds,
        tolerance: a.tolerance,
        ..SuiteConfig::default()
    };
    let names: Vec<&str> = if a.operators.is_empty() {
        OPERATORS.to_vec()
    } else {
        a.operators.iter().map(String::as_str).collect()
    };
    let reports = names
        .par_iter()
        .map(|n| run_operator(n, &cfg))
        .collect::<lidarpan::Result<Vec<_>>>()?;
    let mut failed = Vec::new();
    for r in &reports {
        emit_json(
            out,
            &json!({
                "version": FORMAT_VERSION,
                "operator": r.name,
                "seeds": r.seeds,
                "max_rel_error": r.max_rel_error,
                "checked": r.checked,
                "excluded": r.excluded,
                "passed": r.passed,
            }),
        )?;
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "gradient check above tolerance {} for {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}
