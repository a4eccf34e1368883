//! Synthetic LiDAR scans with known ground truth.
//!
//! Clouds are laid out so that the unfolding projection recovers an exact
//! raster: one ring per row, one point per column centre, rings ordered
//! by increasing yaw and starting just past 0 degrees.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::io::{LabelSet, PointCloud};

/// Column order of one ring with yaw increasing from 0 to 360 degrees.
pub fn ring_columns(width: usize) -> Vec<usize> {
    let half = width / 2;
    (0..half).rev().chain((half..width).rev()).collect()
}

/// Azimuth (radians, `atan2` convention) of the centre of column `col`.
pub fn column_center(col: usize, width: usize) -> f64 {
    PI * (1.0 - 2.0 * (col as f64 + 0.5) / width as f64)
}

/// Elevation of row `row`, top row highest.
pub fn row_elevation(row: usize, rows: usize) -> f64 {
    let span = 26.0_f64.to_radians();
    2.0_f64.to_radians() - span * (row as f64 + 0.5) / rows as f64
}

pub fn point_at(range: f64, azimuth: f64, elevation: f64, intensity: f32) -> [f32; 4] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [
        (range * ce * ca) as f32,
        (range * ce * sa) as f32,
        (range * se) as f32,
        intensity,
    ]
}

/// A vertical band of columns shared by every row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub col0: usize,
    pub col1: usize,
    pub semantic: u32,
    pub instance: u32,
    pub range: f64,
}

#[derive(Clone, Debug)]
pub struct CloudSpec {
    pub rows: usize,
    pub width: usize,
    /// Probability that a point (other than a ring's first and last) is missing.
    pub dropout: f64,
    /// Fraction of points that get an extra, farther point in the same pixel.
    pub occlusion: f64,
    /// `(learning id, is thing)` pairs to draw segment classes from.
    pub classes: Vec<(u32, bool)>,
}

impl Default for CloudSpec {
    fn default() -> Self {
        CloudSpec {
            rows: 16,
            width: 512,
            dropout: 0.1,
            occlusion: 0.0,
            classes: vec![(1, false), (2, false), (3, false), (4, true), (5, true)],
        }
    }
}

/// A synthetic scan: the cloud, its labels and the per-point flag marking
/// injected occluded points.
#[derive(Clone, Debug)]
pub struct SyntheticCloud {
    pub cloud: PointCloud,
    pub labels: LabelSet,
    pub occluded: Vec<bool>,
    pub segments: Vec<Segment>,
}

fn random_segments<R: Rng>(rng: &mut R, spec: &CloudSpec) -> Vec<Segment> {
    let count = rng.gen_range(4..=12usize).min(spec.width);
    let mut cuts: Vec<usize> = (1..spec.width).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(count - 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(spec.width);
    let mut slots: Vec<usize> = (0..count).collect();
    slots.shuffle(rng);
    let mut next_instance = 1;
    bounds
        .windows(2)
        .zip(slots)
        .map(|(b, slot)| {
            let (semantic, thing) = spec.classes[rng.gen_range(0..spec.classes.len())];
            let instance = if thing {
                next_instance += 1;
                next_instance - 1
            } else {
                0
            };
            Segment {
                col0: b[0],
                col1: b[1],
                semantic,
                instance,
                range: 5.0 + 3.0 * slot as f64 + rng.gen_range(0.0..0.5),
            }
        })
        .collect()
}

/// A cloud whose projection is collision-free unless `occlusion > 0`.
pub fn synthetic_cloud<R: Rng>(rng: &mut R, spec: &CloudSpec) -> SyntheticCloud {
    let segments = random_segments(rng, spec);
    let mut seg_of_col = vec![0; spec.width];
    for (i, s) in segments.iter().enumerate() {
        seg_of_col[s.col0..s.col1].fill(i);
    }
    let order = ring_columns(spec.width);
    let mut points = Vec::new();
    let (mut semantic, mut instance, mut occluded) = (Vec::new(), Vec::new(), Vec::new());
    for row in 0..spec.rows {
        let elevation = row_elevation(row, spec.rows);
        for (j, &col) in order.iter().enumerate() {
            let edge = j == 0 || j + 1 == order.len();
            if !edge && rng.gen_bool(spec.dropout) {
                continue;
            }
            let s = segments[seg_of_col[col]];
            let range = s.range + 0.01 * row as f64;
            let intensity = rng.gen_range(0.0..1.0);
            points.push(point_at(
                range,
                column_center(col, spec.width),
                elevation,
                intensity,
            ));
            semantic.push(s.semantic);
            instance.push(s.instance);
            occluded.push(false);
            if spec.occlusion > 0.0 && rng.gen_bool(spec.occlusion) {
                let behind = segments[rng.gen_range(0..segments.len())];
                points.push(point_at(
                    range + 1.5,
                    column_center(col, spec.width),
                    elevation,
                    intensity,
                ));
                semantic.push(behind.semantic);
                instance.push(if behind.instance > 0 {
                    behind.instance + 1000
                } else {
                    0
                });
                occluded.push(true);
            }
        }
    }
    SyntheticCloud {
        cloud: PointCloud::new(points),
        labels: LabelSet { semantic, instance },
        occluded,
        segments,
    }
}

/// Panoptic layout of a toy training scene: learning ids of the synthetic
/// class map (1 road, 2 building, 3 vegetation, 4 car, 5 person).
#[derive(Clone, Debug)]
pub struct SceneLayout {
    pub rows: usize,
    pub width: usize,
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
    pub range: Vec<f64>,
}

/// A street-like scene with block boundaries on multiples of 4 pixels.
pub fn scene_layout<R: Rng>(rng: &mut R, rows: usize, width: usize) -> SceneLayout {
    let n = rows * width;
    let (mut semantic, mut instance, mut range) = (vec![0; n], vec![0; n], vec![0.0; n]);
    let ground = rows * 3 / 4 / 4 * 4;
    let blocks = width / 8;
    let mut backdrop = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        backdrop.push(if rng.gen_bool(0.5) { 2 } else { 3 });
    }
    for r in 0..rows {
        for c in 0..width {
            let p = r * width + c;
            if r >= ground {
                semantic[p] = 1;
                range[p] = 4.0 + 12.0 * (rows - r) as f64 / (rows - ground) as f64;
            } else {
                let class = backdrop[c / 8];
                semantic[p] = class;
                range[p] = if class == 2 { 25.0 } else { 18.0 } + 0.1 * (c % 8) as f64;
            }
        }
    }
    let mut next = 1;
    let mut c = 4 * rng.gen_range(0..2usize);
    while c + 8 <= width {
        let (class, w, h) = if rng.gen_bool(0.6) {
            (4, 8, 8)
        } else {
            (5, 4, 12)
        };
        if c + w > width {
            break;
        }
        let depth = rng.gen_range(8.0..12.0);
        for r in ground - h..ground {
            for cc in c..c + w {
                let p = r * width + cc;
                semantic[p] = class;
                instance[p] = next;
                range[p] = depth;
            }
        }
        next += 1;
        c += w + 4 * rng.gen_range(2..5usize);
    }
    SceneLayout {
        rows,
        width,
        semantic,
        instance,
        range,
    }
}

/// Renders a layout into a scan in native order, with class-dependent
/// intensity and a small fraction of dropped points.
pub fn render_scene<R: Rng>(
    rng: &mut R,
    layout: &SceneLayout,
    dropout: f64,
) -> (PointCloud, LabelSet) {
    const INTENSITY: [f32; 6] = [0.0, 0.15, 0.4, 0.6, 0.8, 0.95];
    let order = ring_columns(layout.width);
    let mut points = Vec::new();
    let (mut semantic, mut instance) = (Vec::new(), Vec::new());
    for r in 0..layout.rows {
        let elevation = row_elevation(r, layout.rows);
        for (j, &c) in order.iter().enumerate() {
            let edge = j == 0 || j + 1 == order.len();
            if !edge && rng.gen_bool(dropout) {
                continue;
            }
            let p = r * layout.width + c;
            let s = layout.semantic[p];
            let intensity = INTENSITY[s as usize] + rng.gen_range(-0.05..0.05);
            points.push(point_at(
                layout.range[p],
                column_center(c, layout.width),
                elevation,
                intensity,
            ));
            semantic.push(s);
            instance.push(layout.instance[p]);
        }
    }
    (PointCloud::new(points), LabelSet { semantic, instance })
}
