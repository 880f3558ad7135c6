//! Campaign configuration: a TOML file of flat keys plus nested sections,
//! every key overridable from the command line via `--set path.key=value`.

use crate::camera::CameraConfig;
use crate::fitness::FitnessConfig;
use crate::lidar::LidarConfig;
use crate::metrics::MatchMode;
use crate::pose::PoseConfig;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: {1}")]
    Override(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Trial acceptance strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// Keep a trial only when it strictly increases the fitness score.
    Guided,
    /// Keep the first collision-free trial unconditionally.
    Random,
}

/// Detector selection and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SutConfig {
    Builtin {
        #[serde(default)]
        params: BuiltinParams,
    },
    External {
        /// Shell command with `{frame_dir}` and `{out_file}` placeholders.
        command: String,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
}

fn default_timeout() -> f64 {
    30.0
}

impl Default for SutConfig {
    fn default() -> Self {
        SutConfig::Builtin { params: BuiltinParams::default() }
    }
}

/// Reference geometric detector parameters and fault injectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuiltinParams {
    pub cluster_radius: f64,
    pub min_points: usize,
    /// Score saturates at this cluster size.
    pub score_points: f64,
    /// Injector: drop detections farther than this, meters.
    pub max_range: Option<f64>,
    /// Injector: drop each detection with this probability.
    pub dropout: Option<f64>,
    /// Injector: scale box dimensions by this factor.
    pub inflate: Option<f64>,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        BuiltinParams {
            cluster_radius: 0.7,
            min_points: 20,
            score_points: 150.0,
            max_range: None,
            dropout: None,
            inflate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub seeds_dir: PathBuf,
    pub objects_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Maximum insertions per seed (N).
    pub n_insertions: u32,
    /// Trials per insertion (TRY_NUM).
    pub try_num: u32,
    /// IOU threshold for successful detection.
    pub tau: f64,
    pub guidance: Guidance,
    pub rng_seed: u64,
    /// Faults are computed within this category.
    pub category: String,
    /// Geometry the fitness evaluation matches on.
    pub fitness_mode: MatchMode,
    /// Trials whose insertion draws fewer LiDAR returns than this are
    /// rejected (the object would be invisible to the point-cloud branch).
    pub min_object_points: usize,
    /// Trials where less than this fraction of the inserted object's
    /// rasterized pixels survives the depth test are rejected (the object
    /// would be almost fully hidden in the image).
    pub min_visible_fraction: f64,
    pub fitness: FitnessConfig,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    pub pose: PoseConfig,
    pub sut: SutConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seeds_dir: PathBuf::from("seeds"),
            objects_dir: PathBuf::from("objects"),
            output_dir: PathBuf::from("out"),
            n_insertions: 3,
            try_num: 5,
            tau: 0.5,
            guidance: Guidance::Guided,
            rng_seed: 0,
            category: "Car".to_string(),
            fitness_mode: MatchMode::Mode3d,
            min_object_points: 5,
            min_visible_fraction: 0.5,
            fitness: FitnessConfig::default(),
            lidar: LidarConfig::default(),
            camera: CameraConfig::default(),
            pose: PoseConfig::default(),
            sut: SutConfig::default(),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_insertions < 1 {
            return Err(ConfigError::Invalid("n_insertions must be >= 1".into()));
        }
        if self.try_num < 1 {
            return Err(ConfigError::Invalid("try_num must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ConfigError::Invalid(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        self.fitness.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// The pose module shares the fitness module's max recognition
    /// distance.
    pub fn normalized(mut self) -> Self {
        self.pose.dis_max = self.fitness.dis_max;
        self
    }
}

fn merge_table(base: &mut toml::Table, incoming: toml::Table) {
    for (k, v) in incoming {
        match base.remove(&k) {
            Some(toml::Value::Table(mut bt)) => {
                if let toml::Value::Table(it) = v {
                    merge_table(&mut bt, it);
                    base.insert(k, toml::Value::Table(bt));
                } else {
                    base.insert(k, v);
                }
            }
            _ => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `path.to.key=value` into a nested single-entry table.
fn override_table(spec: &str) -> Result<toml::Table, ConfigError> {
    let (path, value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.into(), "expected key=value".into()))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::Override(spec.into(), "empty key path".into()));
    }
    let leaf = segments.last().unwrap();
    // Let TOML parse the value; fall back to a string literal.
    let parsed: toml::Table = format!("{leaf} = {}", value.trim())
        .parse()
        .or_else(|_| format!("{leaf} = {:?}", value.trim()).parse())
        .map_err(|e: toml::de::Error| ConfigError::Override(spec.into(), e.to_string()))?;
    let mut table = parsed;
    for seg in segments[..segments.len() - 1].iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(seg.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

/// Load a campaign config from TOML text plus `--set` style overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<CampaignConfig, ConfigError> {
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for spec in overrides {
        merge_table(&mut table, override_table(spec)?);
    }
    let cfg: CampaignConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg.normalized())
}

/// Load a campaign config from a file plus overrides.
pub fn load_config(path: &std::path::Path, overrides: &[String]) -> Result<CampaignConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
    parse_config(&text, overrides)
}
