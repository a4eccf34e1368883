use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lidarpan::fusion::FusionConfig;
use lidarpan::heads::HeadConfig;
use lidarpan::io::ClassMap;
use lidarpan::projection::{BackprojectConfig, ProjectionConfig};
use serde::{Deserialize, Serialize};

use crate::error::{AtPath, CliError, CliResult, Kind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Stuff,
    Thing,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub split: Split,
    /// Border band width for border IoU; only 2D panoptic maps support it.
    pub border_width: Option<usize>,
}

/// Settings shared by every subcommand, read from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Preset name, or a path to a class-map JSON file when it ends in `.json`.
    pub class_map: String,
    pub projection: ProjectionConfig,
    pub backproject: BackprojectConfig,
    pub fusion: FusionConfig,
    pub metrics: MetricOptions,
    /// Network configuration; defaults to the toy widths with one output
    /// per learning class.
    pub head: Option<HeadConfig>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            class_map: "synthetic".into(),
            projection: ProjectionConfig::default(),
            backproject: BackprojectConfig::default(),
            fusion: FusionConfig::default(),
            metrics: MetricOptions::default(),
            head: None,
            seed: 7,
        }
    }
}

impl RunConfig {
    /// Parses and validates a config, reporting the key path of the first
    /// offending value.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError {
                key: Some(key),
                ..CliError::validation(e.inner().to_string())
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::data(path, e.to_string()))?;
        Self::from_json(&text).map_err(|e| e.at(path))
    }

    pub fn validate(&self) -> CliResult<()> {
        let keyed = |key: &str, r: lidarpan::Result<()>| {
            r.map_err(|e| CliError {
                key: Some(key.into()),
                ..CliError::new(Kind::Validation, e.to_string())
            })
        };
        keyed("projection", self.projection.validate())?;
        keyed("backproject", self.backproject.validate())?;
        keyed("fusion", self.fusion.validate())
    }

    pub fn class_map(&self) -> CliResult<ClassMap> {
        load_class_map(&self.class_map)
    }

    pub fn head(&self, map: &ClassMap) -> HeadConfig {
        self.head.clone().unwrap_or_else(|| HeadConfig {
            num_classes: map.num_classes(),
            ..HeadConfig::default()
        })
    }
}

/// Resolves a preset name or a `.json` class-map path.
pub fn load_class_map(source: &str) -> CliResult<ClassMap> {
    if source.ends_with(".json") {
        let path = PathBuf::from(source);
        ClassMap::load(&path).at(&path)
    } else {
        ClassMap::preset(source).map_err(|e| CliError::validation(e.to_string()))
    }
}
