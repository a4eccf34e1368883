//! On-disk LiDAR scan and panoptic label formats, and class maps.
//!
//! * `.bin` scans: little-endian `f32` quadruples `(x, y, z, intensity)`.
//! * `.label` files: little-endian `u32` per point, semantic id in the low
//!   16 bits and instance id in the high 16 bits.
//! * `.plm` panoptic label maps (2D): magic `LPLM`, version `u32`, height
//!   and width `u32`, then `height * width` packed labels as above.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SCAN_RECORD: usize = 16;
const LABEL_RECORD: usize = 4;

/// A LiDAR scan in native sensor order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    /// `(x, y, z, intensity)`, metres for coordinates.
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 4]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Euclidean distance of point `i` from the sensor.
    pub fn range(&self, i: usize) -> f32 {
        let [x, y, z, _] = self.points[i].map(f64::from);
        (x * x + y * y + z * z).sqrt() as f32
    }
}

pub fn read_scan(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(SCAN_RECORD) {
        return Err(Error::Truncated {
            what: "scan",
            offset: bytes.len() - bytes.len() % SCAN_RECORD,
        });
    }
    let points = bytes
        .chunks_exact(SCAN_RECORD)
        .map(|rec| {
            let f = |i: usize| {
                f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4-byte field"))
            };
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(PointCloud { points })
}

pub fn write_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * SCAN_RECORD);
    for p in &cloud.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Per-point semantic and instance ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    pub semantic: Vec<u32>,
    /// 0 means "no instance".
    pub instance: Vec<u32>,
}

impl LabelSet {
    pub fn new(semantic: Vec<u32>, instance: Vec<u32>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::shape(
                "label_set",
                &[semantic.len()],
                &[instance.len()],
            ));
        }
        Ok(LabelSet { semantic, instance })
    }

    pub fn filled(n: usize, semantic: u32) -> Self {
        LabelSet {
            semantic: vec![semantic; n],
            instance: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    /// Point count of every `(semantic, instance)` group with a nonzero instance.
    pub fn instance_sizes(&self) -> BTreeMap<(u32, u32), usize> {
        let mut sizes = BTreeMap::new();
        for (&s, &i) in self.semantic.iter().zip(&self.instance) {
            if i != 0 {
                *sizes.entry((s, i)).or_insert(0) += 1;
            }
        }
        sizes
    }
}

#[inline]
pub fn pack_label(semantic: u32, instance: u32) -> u32 {
    (semantic & 0xFFFF) | (instance << 16)
}

#[inline]
pub fn unpack_label(v: u32) -> (u32, u32) {
    (v & 0xFFFF, v >> 16)
}

fn check_packable(semantic: &[u32], instance: &[u32]) -> Result<()> {
    for (index, (&s, &i)) in semantic.iter().zip(instance).enumerate() {
        if s > 0xFFFF {
            return Err(Error::OutOfRange {
                what: "semantic id",
                index,
                value: s as u64,
                bits: 16,
            });
        }
        if i > 0xFFFF {
            return Err(Error::OutOfRange {
                what: "instance id",
                index,
                value: i as u64,
                bits: 16,
            });
        }
    }
    Ok(())
}

pub fn read_labels(bytes: &[u8]) -> Result<LabelSet> {
    if !bytes.len().is_multiple_of(LABEL_RECORD) {
        return Err(Error::Truncated {
            what: "labels",
            offset: bytes.len() - bytes.len() % LABEL_RECORD,
        });
    }
    let (semantic, instance) = bytes
        .chunks_exact(LABEL_RECORD)
        .map(|c| unpack_label(u32::from_le_bytes(c.try_into().expect("4-byte record"))))
        .unzip();
    Ok(LabelSet { semantic, instance })
}

pub fn write_labels(labels: &LabelSet) -> Result<Vec<u8>> {
    check_packable(&labels.semantic, &labels.instance)?;
    Ok(labels
        .semantic
        .iter()
        .zip(&labels.instance)
        .flat_map(|(&s, &i)| pack_label(s, i).to_le_bytes())
        .collect())
}

pub fn load_scan(path: &Path) -> Result<PointCloud> {
    read_scan(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    read_labels(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    std::fs::write(path, write_labels(labels)?).map_err(|e| Error::io(path, e))
}

pub fn save_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, write_scan(cloud)).map_err(|e| Error::io(path, e))
}

/// Dense 2D panoptic labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
}

const PLM_MAGIC: &[u8; 4] = b"LPLM";
pub const PLM_VERSION: u32 = 1;

impl PanopticMap {
    pub fn filled(height: usize, width: usize, semantic: u32) -> Self {
        PanopticMap {
            height,
            width,
            semantic: vec![semantic; height * width],
            instance: vec![0; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> (u32, u32) {
        let i = row * self.width + col;
        (self.semantic[i], self.instance[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_packable(&self.semantic, &self.instance)?;
        let mut out = Vec::with_capacity(16 + 4 * self.len());
        out.extend_from_slice(PLM_MAGIC);
        out.extend_from_slice(&PLM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (&s, &i) in self.semantic.iter().zip(&self.instance) {
            out.extend_from_slice(&pack_label(s, i).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "panoptic map";
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                what: WHAT,
                offset: bytes.len(),
            });
        }
        if &bytes[..4] != PLM_MAGIC {
            return Err(Error::Format {
                what: WHAT,
                message: "missing LPLM magic".into(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte field"));
        let version = word(4);
        if version != PLM_VERSION {
            return Err(Error::Format {
                what: WHAT,
                message: format!("unsupported version {version}"),
            });
        }
        let (height, width) = (word(8) as usize, word(12) as usize);
        let body = &bytes[16..];
        if body.len() != 4 * height * width {
            return Err(Error::Truncated {
                what: WHAT,
                offset: 16 + body.len().min(4 * height * width) / 4 * 4,
            });
        }
        let labels = read_labels(body)?;
        Ok(PanopticMap {
            height,
            width,
            semantic: labels.semantic,
            instance: labels.instance,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn as_label_set(&self) -> LabelSet {
        LabelSet {
            semantic: self.semantic.clone(),
            instance: self.instance.clone(),
        }
    }
}

/// One learning class of a [`ClassMap`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub raw_ids: Vec<u32>,
    pub learning_id: u32,
    #[serde(default)]
    pub thing: bool,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassMapFile {
    #[serde(default = "default_version")]
    version: u32,
    #[serde(default)]
    name: Option<String>,
    min_instance_points: usize,
    classes: Vec<ClassSpec>,
}

fn default_version() -> u32 {
    1
}

/// Raw dataset ids to contiguous learning ids, with stuff/thing and ignore
/// flags and the minimum instance size.
#[derive(Clone, Debug)]
pub struct ClassMap {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub min_instance_points: usize,
    raw_to_learning: HashMap<u32, u32>,
    ignore_id: u32,
    channels: Vec<u32>,
}

/// What happens to instances smaller than `min_instance_points`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmallInstancePolicy {
    /// Keep the semantic class, clear the instance id.
    #[default]
    KeepSemantic,
    /// Relabel the points to the ignore class.
    Ignore,
}

impl ClassMap {
    pub fn new(
        name: impl Into<String>,
        mut classes: Vec<ClassSpec>,
        min_instance_points: usize,
    ) -> Result<Self> {
        classes.sort_by_key(|c| c.learning_id);
        for (i, c) in classes.iter().enumerate() {
            if c.learning_id != i as u32 {
                return Err(Error::ClassMap(format!(
                    "learning ids must be contiguous from 0; expected {i}, found {} ({})",
                    c.learning_id, c.name
                )));
            }
        }
        let ignores: Vec<&ClassSpec> = classes.iter().filter(|c| c.ignore).collect();
        if ignores.len() != 1 {
            return Err(Error::ClassMap(format!(
                "exactly one ignore class required, found {}",
                ignores.len()
            )));
        }
        let ignore_id = ignores[0].learning_id;
        if ignores[0].thing {
            return Err(Error::ClassMap("the ignore class cannot be a thing".into()));
        }
        let mut raw_to_learning = HashMap::new();
        for c in &classes {
            for &raw in &c.raw_ids {
                if raw_to_learning.insert(raw, c.learning_id).is_some() {
                    return Err(Error::ClassMap(format!("raw id {raw} mapped twice")));
                }
            }
        }
        let channels = classes
            .iter()
            .filter(|c| !c.ignore)
            .map(|c| c.learning_id)
            .collect();
        Ok(ClassMap {
            name: name.into(),
            classes,
            min_instance_points,
            raw_to_learning,
            ignore_id,
            channels,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ClassMapFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(Error::ClassMap(format!(
                "unsupported version {}",
                file.version
            )));
        }
        Self::new(
            file.name.unwrap_or_else(|| "custom".into()),
            file.classes,
            file.min_instance_points,
        )
    }

    pub fn to_json(&self) -> String {
        let file = ClassMapFile {
            version: 1,
            name: Some(self.name.clone()),
            min_instance_points: self.min_instance_points,
            classes: self.classes.clone(),
        };
        serde_json::to_string_pretty(&file).expect("class map serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Built-in maps: `semantic-kitti` (19 classes, 50-point instances),
    /// `nuscenes` (16 classes, 15-point instances) and `synthetic`.
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "semantic-kitti" => include_str!("../presets/semantic-kitti.json"),
            "nuscenes" => include_str!("../presets/nuscenes.json"),
            "synthetic" => include_str!("../presets/synthetic.json"),
            other => return Err(Error::ClassMap(format!("unknown preset {other:?}"))),
        };
        Self::from_json(text)
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }

    pub fn is_thing(&self, learning_id: u32) -> bool {
        self.classes
            .get(learning_id as usize)
            .is_some_and(|c| c.thing)
    }

    pub fn is_stuff(&self, learning_id: u32) -> bool {
        self.classes
            .get(learning_id as usize)
            .is_some_and(|c| !c.thing && !c.ignore)
    }

    pub fn name_of(&self, learning_id: u32) -> &str {
        self.classes
            .get(learning_id as usize)
            .map_or("?", |c| c.name.as_str())
    }

    /// Evaluated learning ids in logit-channel order.
    pub fn channels(&self) -> &[u32] {
        &self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_of(&self, learning_id: u32) -> Option<usize> {
        self.channels.iter().position(|&c| c == learning_id)
    }

    pub fn class_of_channel(&self, channel: usize) -> u32 {
        self.channels[channel]
    }

    pub fn learning_id(&self, raw: u32) -> Option<u32> {
        self.raw_to_learning.get(&raw).copied()
    }
}

/// Maps raw semantic ids to learning ids, clears instance ids of stuff and
/// ignore points, and drops instances below `min_instance_points`.
pub fn remap_and_filter(
    labels: &LabelSet,
    map: &ClassMap,
    policy: SmallInstancePolicy,
) -> Result<LabelSet> {
    let mut unknown: Vec<u32> = Vec::new();
    let mut semantic = Vec::with_capacity(labels.len());
    for &raw in &labels.semantic {
        match map.learning_id(raw) {
            Some(id) => semantic.push(id),
            None => {
                if !unknown.contains(&raw) {
                    unknown.push(raw);
                }
                semantic.push(map.ignore_id());
            }
        }
    }
    if !unknown.is_empty() {
        unknown.sort_unstable();
        return Err(Error::UnknownClass(unknown));
    }
    let mut instance: Vec<u32> = semantic
        .iter()
        .zip(&labels.instance)
        .map(|(&s, &i)| if map.is_thing(s) { i } else { 0 })
        .collect();
    let mut out = LabelSet {
        semantic,
        instance: Vec::new(),
    };
    let sizes = {
        out.instance = std::mem::take(&mut instance);
        out.instance_sizes()
    };
    for p in 0..out.len() {
        let key = (out.semantic[p], out.instance[p]);
        if key.1 != 0 && sizes[&key] < map.min_instance_points {
            out.instance[p] = 0;
            if policy == SmallInstancePolicy::Ignore {
                out.semantic[p] = map.ignore_id();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_encoded_scan() {
        let mut bytes = Vec::new();
        for v in [1.0_f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = read_scan(&bytes).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0, 0.5]]);
        assert!(read_scan(&[]).unwrap().is_empty());
    }

    #[test]
    fn seventeen_bytes_truncate_at_sixteen() {
        match read_scan(&[0u8; 17]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_labels(&[0u8; 7]),
            Err(Error::Truncated { offset: 4, .. })
        ));
    }

    #[test]
    fn label_bit_fields() {
        let labels = read_labels(&0x0001_000A_u32.to_le_bytes()).unwrap();
        assert_eq!(labels.semantic, vec![10]);
        assert_eq!(labels.instance, vec![1]);
    }

    #[test]
    fn oversized_semantic_id_is_rejected() {
        let labels = LabelSet::new(vec![3, 0x1_0000], vec![0, 0]).unwrap();
        assert!(matches!(
            write_labels(&labels),
            Err(Error::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn presets_validate() {
        let kitti = ClassMap::preset("semantic-kitti").unwrap();
        assert_eq!(kitti.num_classes(), 19);
        assert_eq!(kitti.min_instance_points, 50);
        assert_eq!(kitti.learning_id(252), Some(1));
        let nus = ClassMap::preset("nuscenes").unwrap();
        assert_eq!(nus.num_classes(), 16);
        assert_eq!(nus.min_instance_points, 15);
        assert_eq!(nus.classes.iter().filter(|c| c.thing).count(), 10);
    }

    #[test]
    fn class_map_rejects_gaps_and_double_ignore() {
        let spec = |id, ignore| ClassSpec {
            name: format!("c{id}"),
            raw_ids: vec![id * 10],
            learning_id: id,
            thing: false,
            ignore,
        };
        assert!(ClassMap::new("x", vec![spec(0, true), spec(2, false)], 1).is_err());
        assert!(ClassMap::new("x", vec![spec(0, true), spec(1, true)], 1).is_err());
        assert!(ClassMap::new("x", vec![spec(0, false), spec(1, false)], 1).is_err());
        assert!(ClassMap::new("x", vec![spec(0, true), spec(1, false)], 1).is_ok());
    }

    fn car_labels(points: usize) -> LabelSet {
        // raw 10 = car, raw 40 = road
        let mut semantic = vec![10; points];
        let mut instance = vec![7; points];
        semantic.extend([40, 40]);
        instance.extend([3, 3]);
        LabelSet::new(semantic, instance).unwrap()
    }

    #[test]
    fn instance_below_threshold_is_cleared() {
        let map = ClassMap::preset("semantic-kitti").unwrap();
        let out =
            remap_and_filter(&car_labels(49), &map, SmallInstancePolicy::KeepSemantic).unwrap();
        assert!(out.semantic[..49].iter().all(|&s| s == 1));
        assert!(out.instance.iter().all(|&i| i == 0));
        let ignored = remap_and_filter(&car_labels(49), &map, SmallInstancePolicy::Ignore).unwrap();
        assert!(ignored.semantic[..49].iter().all(|&s| s == map.ignore_id()));
    }

    #[test]
    fn instance_at_threshold_is_kept() {
        let map = ClassMap::preset("semantic-kitti").unwrap();
        let out =
            remap_and_filter(&car_labels(50), &map, SmallInstancePolicy::KeepSemantic).unwrap();
        assert!(out.instance[..50].iter().all(|&i| i == 7));
        // stuff points never keep an instance id
        assert_eq!(&out.instance[50..], &[0, 0]);
        assert_eq!(&out.semantic[50..], &[9, 9]);
    }

    #[test]
    fn unknown_raw_ids_are_listed() {
        let map = ClassMap::preset("semantic-kitti").unwrap();
        let labels = LabelSet::new(vec![10, 12345, 77, 12345], vec![0; 4]).unwrap();
        match remap_and_filter(&labels, &map, SmallInstancePolicy::KeepSemantic) {
            Err(Error::UnknownClass(ids)) => assert_eq!(ids, vec![77, 12345]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plm_rejects_bad_magic_and_version() {
        let map = PanopticMap::filled(2, 3, 4);
        let mut bytes = map.to_bytes().unwrap();
        assert_eq!(PanopticMap::from_bytes(&bytes).unwrap(), map);
        bytes[4] = 9;
        assert!(matches!(
            PanopticMap::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            PanopticMap::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
    }
}
