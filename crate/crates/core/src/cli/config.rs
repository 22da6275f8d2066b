use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LidarConfig, SceneConfig, SequenceConfig};
use crate::error::{Error, Result};
use crate::forecast::PipelineConfig;
use crate::metrics::EvalSettings;
use crate::render::RenderSettings;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_sequences: usize,
    pub scene: SceneConfig,
    pub lidar: LidarConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { num_sequences: 4, scene: SceneConfig::default(), lidar: LidarConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Horizontal crop radius for NFCD, m.
    pub near_field_radius: f64,
    pub max_range: f64,
    pub background_depth: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { near_field_radius: 35.0, max_range: 40.0, background_depth: 40.0 }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            render: RenderSettings { max_range: self.max_range, background_depth: self.background_depth },
            near_field_radius: self.near_field_radius,
        }
    }
}

/// Everything a run needs, read from one TOML file. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if !(e.near_field_radius > 0.0 && e.max_range > 0.0 && e.background_depth >= e.max_range) {
            return Err(Error::Config("eval needs near_field_radius > 0 and 0 < max_range <= background_depth".into()));
        }
        if self.generator.lidar.azimuth_count == 0 {
            return Err(Error::Config("generator.lidar.azimuth_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Frame cadence of generated sequences, taken from the pipeline.
    pub fn sequence_config(&self) -> SequenceConfig {
        SequenceConfig {
            num_past: self.pipeline.num_past,
            num_future: self.pipeline.num_future,
            frame_period: self.pipeline.frame_period,
            lidar: self.generator.lidar.clone(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads `path` (or starts from defaults when `None`), then applies
    /// `key=value` overrides with dotted keys, e.g. `train.schedule.lr_max=0.01`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let config = if overrides.is_empty() { base } else { apply_overrides(&base, overrides)? };
        config.validate()?;
        Ok(config)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_overrides(base: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut root = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
        let key = key.trim();
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        }
        *node = parse_value(raw.trim());
    }
    root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}
