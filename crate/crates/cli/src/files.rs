//! On-disk formats owned by the command-line tool. Every JSON document
//! carries `version`, checked on read.

use std::path::{Path, PathBuf};

use lidarpan::fusion::{BBox, InstancePrediction};
use lidarpan::projection::{RangeImage, CHANNELS};
use lidarpan::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::data(path, e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(dir, e.to_string()))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::data(path, e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = read_bytes(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| CliError {
        key: Some(e.path().to_string()),
        ..CliError::data(path, e.inner().to_string())
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn check_version(path: &Path, version: u32) -> CliResult<()> {
    if version == FORMAT_VERSION {
        Ok(())
    } else {
        Err(CliError::data(
            path,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ))
    }
}

/// Raw little-endian f32 values.
pub fn read_f32s(path: &Path) -> CliResult<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(CliError::data(
            path,
            format!("length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

pub fn write_f32s(path: &Path, values: &[f32]) -> CliResult<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

fn resolve(base: &Path, rel: &Path) -> PathBuf {
    base.parent()
        .map_or_else(|| rel.to_path_buf(), |d| d.join(rel))
}

fn tensor_from(path: &Path, shape: &[usize], values: Vec<f32>) -> CliResult<Tensor<f32>> {
    Tensor::from_vec(shape, values).map_err(|e| CliError::data(path, e.to_string()))
}

/// A tensor stored as raw f32 planes next to a JSON descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub version: u32,
    pub shape: Vec<usize>,
    /// Raw f32 file, relative to the descriptor.
    pub data: PathBuf,
}

pub fn load_tensor(path: &Path) -> CliResult<Tensor<f32>> {
    let desc: TensorFile = read_json(path)?;
    check_version(path, desc.version)?;
    let data = resolve(path, &desc.data);
    tensor_from(&data, &desc.shape, read_f32s(&data)?)
}

/// Sidecar of a projected range image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFile {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub channel_names: Vec<String>,
    /// Raw `(5, H, W)` f32 planes, relative to the sidecar.
    pub channels: PathBuf,
    pub valid: Vec<bool>,
    pub pixel_of_point: Vec<Option<(usize, usize)>>,
    pub point_of_pixel: Vec<Option<usize>>,
}

pub fn save_image(dir: &Path, img: &RangeImage) -> CliResult<PathBuf> {
    let channels = PathBuf::from("channels.f32");
    write_f32s(&dir.join(&channels), img.channels.data())?;
    let path = dir.join("image.json");
    write_json(
        &path,
        &ImageFile {
            version: FORMAT_VERSION,
            height: img.height,
            width: img.width,
            channel_names: CHANNELS.iter().map(|s| s.to_string()).collect(),
            channels,
            valid: img.valid.clone(),
            pixel_of_point: img.pixel_of_point.clone(),
            point_of_pixel: img.point_of_pixel.clone(),
        },
    )?;
    Ok(path)
}

pub fn load_image(path: &Path) -> CliResult<RangeImage> {
    let f: ImageFile = read_json(path)?;
    check_version(path, f.version)?;
    let n = f.height * f.width;
    if f.valid.len() != n || f.point_of_pixel.len() != n {
        return Err(CliError::data(
            path,
            format!("per-pixel arrays do not match {}x{}", f.height, f.width),
        ));
    }
    let data = resolve(path, &f.channels);
    let channels = tensor_from(
        &data,
        &[CHANNELS.len(), f.height, f.width],
        read_f32s(&data)?,
    )?;
    Ok(RangeImage {
        height: f.height,
        width: f.width,
        channels,
        valid: f.valid,
        pixel_of_point: f.pixel_of_point,
        point_of_pixel: f.point_of_pixel,
    })
}

/// One instance of an instances file. `bbox` is `[row0, col0, row1, col1]`,
/// half-open; `mask` holds raw f32 logits at box or canvas extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceEntry {
    pub class_id: u32,
    pub score: f64,
    pub bbox: [usize; 4],
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstancesFile {
    pub version: u32,
    pub instances: Vec<InstanceEntry>,
}

/// Reads instances; a mask whose length matches the canvas is taken at
/// canvas extent, otherwise it must match the box.
pub fn load_instances(
    path: &Path,
    height: usize,
    width: usize,
) -> CliResult<Vec<InstancePrediction>> {
    let f: InstancesFile = read_json(path)?;
    check_version(path, f.version)?;
    f.instances
        .iter()
        .map(|e| {
            let [r0, c0, r1, c1] = e.bbox;
            let bbox = BBox::new(r0, c0, r1, c1);
            let mask = resolve(path, &e.mask);
            let values = read_f32s(&mask)?;
            let shape = if values.len() == height * width {
                [height, width]
            } else {
                [bbox.height(), bbox.width()]
            };
            Ok(InstancePrediction {
                class_id: e.class_id,
                score: e.score,
                bbox,
                mask_logits: tensor_from(&mask, &shape, values)?,
            })
        })
        .collect()
}
