//! Scan-unfolding projection of point clouds into 5-channel range images,
//! resolution adaptation, and kNN-voted back-projection of 2D labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LabelSet, PanopticMap, PointCloud};
use crate::kernels::{nearest_indices, resize_bilinear};
use crate::tensor::Tensor;

/// Channel order of [`RangeImage::channels`].
pub const CHANNELS: [&str; 5] = ["range", "intensity", "x", "y", "z"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub width: usize,
    /// Fixed row count; `None` derives it from the unfolded scan.
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default = "default_threshold")]
    pub yaw_jump_threshold_deg: f64,
}

fn default_threshold() -> f64 {
    310.0
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            width: 2048,
            rows: Some(64),
            yaw_jump_threshold_deg: default_threshold(),
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid(
                "projection_config",
                "width must be at least 1",
            ));
        }
        if self.rows == Some(0) {
            return Err(Error::invalid(
                "projection_config",
                "rows must be at least 1",
            ));
        }
        let t = self.yaw_jump_threshold_deg;
        if !(t > 0.0 && t < 360.0) {
            return Err(Error::invalid(
                "projection_config",
                format!("yaw jump threshold {t} outside (0, 360)"),
            ));
        }
        Ok(())
    }
}

/// Yaw of `(x, y)` in degrees, normalised to `[0, 360)`.
pub fn yaw_degrees(x: f32, y: f32) -> f64 {
    let d = (y as f64).atan2(x as f64).to_degrees();
    if d < 0.0 {
        d + 360.0
    } else {
        d
    }
}

/// `floor(0.5 * (1 - phi / pi) * W)` clamped into `[0, W - 1]`.
pub fn column_index(phi: f64, width: usize) -> usize {
    let c = (0.5 * (1.0 - phi / std::f64::consts::PI) * width as f64).floor();
    c.clamp(0.0, (width - 1) as f64) as usize
}

/// Row of every point: starts at 0 and increments whenever the yaw of two
/// consecutive points differs by more than `threshold_deg`.
pub fn unfold_rows(
    cloud: &PointCloud,
    threshold_deg: f64,
    rows: Option<usize>,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(cloud.len());
    let mut row = 0;
    let mut prev: Option<f64> = None;
    for (i, p) in cloud.points.iter().enumerate() {
        let yaw = yaw_degrees(p[0], p[1]);
        if let Some(prev) = prev {
            if (yaw - prev).abs() > threshold_deg {
                row += 1;
            }
        }
        if let Some(limit) = rows {
            if row >= limit {
                return Err(Error::TooManyRows {
                    point: i,
                    row,
                    rows: limit,
                });
            }
        }
        out.push(row);
        prev = Some(yaw);
    }
    Ok(out)
}

/// A projected scan with exact point/pixel bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    /// `(5, H, W)`: range, intensity, x, y, z. Zero on invalid pixels.
    pub channels: Tensor<f32>,
    pub valid: Vec<bool>,
    /// Pixel `(row, col)` of every input point.
    pub pixel_of_point: Vec<Option<(usize, usize)>>,
    /// Nearest point of every pixel.
    pub point_of_pixel: Vec<Option<usize>>,
}

impl RangeImage {
    pub fn range(&self) -> &[f32] {
        self.channels.channel(0)
    }

    pub fn range_at(&self, row: usize, col: usize) -> f32 {
        self.channels.data()[row * self.width + col]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// A range image with optionally projected labels.
#[derive(Clone, Debug)]
pub struct Projection {
    pub image: RangeImage,
    /// Labels of each pixel's winning point; `(0, 0)` on invalid pixels.
    pub labels: Option<PanopticMap>,
}

/// Projects a scan with the unfolding row assignment and the yaw column
/// formula. The nearest point wins a pixel (ties keep the earlier point).
pub fn project(
    cloud: &PointCloud,
    labels: Option<&LabelSet>,
    cfg: &ProjectionConfig,
) -> Result<Projection> {
    cfg.validate()?;
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(Error::shape("project", &[cloud.len()], &[l.len()]));
        }
    }
    if cloud
        .points
        .iter()
        .any(|p| p.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite {
            what: "point cloud",
        });
    }
    let rows = unfold_rows(cloud, cfg.yaw_jump_threshold_deg, cfg.rows)?;
    let height = cfg.rows.unwrap_or_else(|| rows.last().map_or(1, |r| r + 1));
    let width = cfg.width;
    let n = height * width;

    let mut point_of_pixel: Vec<Option<usize>> = vec![None; n];
    let mut pixel_of_point = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let col = column_index((p[1] as f64).atan2(p[0] as f64), width);
        let pix = rows[i] * width + col;
        pixel_of_point.push(Some((rows[i], col)));
        match point_of_pixel[pix] {
            Some(j) if cloud.range(j) <= cloud.range(i) => {}
            _ => point_of_pixel[pix] = Some(i),
        }
    }

    let mut channels = Tensor::zeros(&[5, height, width]);
    let mut valid = vec![false; n];
    let mut label_map = labels.map(|_| PanopticMap::filled(height, width, 0));
    for (pix, owner) in point_of_pixel.iter().enumerate() {
        let Some(i) = *owner else { continue };
        let [x, y, z, intensity] = cloud.points[i];
        let data = channels.data_mut();
        for (ch, v) in [cloud.range(i), intensity, x, y, z].into_iter().enumerate() {
            data[ch * n + pix] = v;
        }
        valid[pix] = true;
        if let (Some(map), Some(l)) = (label_map.as_mut(), labels) {
            map.semantic[pix] = l.semantic[i];
            map.instance[pix] = l.instance[i];
        }
    }
    Ok(Projection {
        image: RangeImage {
            height,
            width,
            channels,
            valid,
            pixel_of_point,
            point_of_pixel,
        },
        labels: label_map,
    })
}

/// Resizes channels bilinearly and validity, labels and the point/pixel
/// bookkeeping by nearest neighbour. Pixels that end up invalid are zeroed.
pub fn resize_for_network(
    img: &RangeImage,
    labels: Option<&PanopticMap>,
    height: usize,
    width: usize,
) -> Result<(RangeImage, Option<PanopticMap>)> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(
            "resize_for_network",
            format!("target {height}x{width} has a zero extent"),
        ));
    }
    if let Some(l) = labels {
        if (l.height, l.width) != (img.height, img.width) {
            return Err(Error::shape(
                "resize_for_network",
                &[img.height, img.width],
                &[l.height, l.width],
            ));
        }
    }
    let mut channels = resize_bilinear(&img.channels, height, width)?;
    let rows = nearest_indices(img.height, height);
    let cols = nearest_indices(img.width, width);
    let n = height * width;
    let src = |p: usize| rows[p / width] * img.width + cols[p % width];
    let valid: Vec<bool> = (0..n).map(|p| img.valid[src(p)]).collect();
    let point_of_pixel: Vec<Option<usize>> = (0..n).map(|p| img.point_of_pixel[src(p)]).collect();
    let data = channels.data_mut();
    for ch in 0..5 {
        for p in 0..n {
            if !valid[p] {
                data[ch * n + p] = 0.0;
            }
        }
    }
    for v in &mut data[..n] {
        *v = v.max(0.0);
    }
    let scale = |v: usize, from: usize, to: usize| {
        (((v as f64 + 0.5) * to as f64 / from as f64) as usize).min(to - 1)
    };
    let pixel_of_point = img
        .pixel_of_point
        .iter()
        .map(|pp| pp.map(|(r, c)| (scale(r, img.height, height), scale(c, img.width, width))))
        .collect();
    let resized_labels = labels.map(|l| PanopticMap {
        height,
        width,
        semantic: (0..n).map(|p| l.semantic[src(p)]).collect(),
        instance: (0..n).map(|p| l.instance[src(p)]).collect(),
    });
    Ok((
        RangeImage {
            height,
            width,
            channels,
            valid,
            pixel_of_point,
            point_of_pixel,
        },
        resized_labels,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackprojectConfig {
    pub k: usize,
    /// `(rows, cols)`, both odd.
    pub window: (usize, usize),
    /// Label given to points with no valid candidate pixel.
    #[serde(default)]
    pub ignore_id: u32,
}

impl Default for BackprojectConfig {
    fn default() -> Self {
        BackprojectConfig {
            k: 5,
            window: (5, 5),
            ignore_id: 0,
        }
    }
}

impl BackprojectConfig {
    pub fn validate(&self) -> Result<()> {
        let (wh, ww) = self.window;
        if wh % 2 == 0 || ww % 2 == 0 {
            return Err(Error::invalid(
                "backproject",
                format!("window {wh}x{ww} must have odd extents"),
            ));
        }
        if self.k == 0 || self.k > wh * ww {
            return Err(Error::invalid(
                "backproject",
                format!("k = {} must be in 1..={}", self.k, wh * ww),
            ));
        }
        Ok(())
    }
}

/// Labels every point by a joint `(semantic, instance)` vote of the `k`
/// valid window pixels whose range is closest to the point's. Ties between
/// equally voted labels go to the label of the closest candidate.
pub fn backproject_knn(
    pred: &PanopticMap,
    img: &RangeImage,
    cloud: &PointCloud,
    cfg: &BackprojectConfig,
) -> Result<LabelSet> {
    cfg.validate()?;
    if (pred.height, pred.width) != (img.height, img.width) {
        return Err(Error::shape(
            "backproject",
            &[img.height, img.width],
            &[pred.height, pred.width],
        ));
    }
    if img.pixel_of_point.len() != cloud.len() {
        return Err(Error::shape(
            "backproject",
            &[img.pixel_of_point.len()],
            &[cloud.len()],
        ));
    }
    let (rh, rw) = ((cfg.window.0 / 2) as isize, (cfg.window.1 / 2) as isize);
    let range = img.range();
    let mut out = LabelSet::filled(cloud.len(), cfg.ignore_id);
    let mut candidates: Vec<(f32, usize)> = Vec::with_capacity(cfg.window.0 * cfg.window.1);
    let mut votes: Vec<((u32, u32), usize)> = Vec::with_capacity(cfg.k);
    for (i, pp) in img.pixel_of_point.iter().enumerate() {
        let Some((r0, c0)) = *pp else { continue };
        let rp = cloud.range(i);
        candidates.clear();
        for dr in -rh..=rh {
            for dc in -rw..=rw {
                let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                if r < 0 || c < 0 || r >= img.height as isize || c >= img.width as isize {
                    continue;
                }
                let p = r as usize * img.width + c as usize;
                if img.valid[p] {
                    candidates.push(((range[p] - rp).abs(), p));
                }
            }
        }
        if candidates.is_empty() {
            continue;
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        votes.clear();
        for &(_, p) in candidates.iter().take(cfg.k) {
            let label = (pred.semantic[p], pred.instance[p]);
            match votes.iter_mut().find(|v| v.0 == label) {
                Some(v) => v.1 += 1,
                None => votes.push((label, 1)),
            }
        }
        // first maximum: labels are listed in order of their closest candidate
        let best = votes
            .iter()
            .fold(votes[0], |acc, &v| if v.1 > acc.1 { v } else { acc });
        out.semantic[i] = best.0 .0;
        out.instance[i] = best.0 .1;
    }
    Ok(out)
}
