//! Run configuration: one JSON file gathering the nested module configs,
//! plus dotted-path `--set key=value` overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, VolactError};
use crate::fields::FieldConfig;
use crate::renderer::RenderConfig;
use crate::rootfind::RootFindConfig;
use crate::training::TrainConfig;

/// Dataset synthesis settings: actor poses and the camera ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_poses: usize,
    pub n_cameras: usize,
    pub camera_radius: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// Per-bone joint angle range (radians), uniform sampling.
    pub pose_ranges: Vec<[f64; 2]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_poses: 20,
            n_cameras: 8,
            camera_radius: 2.5,
            focal: 72.0,
            width: 64,
            height: 64,
            pose_ranges: vec![[-0.8, 0.8]; 3],
        }
    }
}

/// Pose clustering settings for train / val-ind / val-ood splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k_clusters: usize,
    pub probes_per_bone: usize,
    /// Index of the root bone removed before pose comparison.
    pub root_bone: usize,
    /// Optional `[start, end)` pose range withheld from clustering entirely.
    pub withhold: Option<[usize; 2]>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            k_clusters: 10,
            probes_per_bone: 256,
            root_bone: 0,
            withhold: None,
        }
    }
}

/// Everything a run needs, serializable as a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub seed: u64,
    pub fields: FieldConfig,
    pub rootfind: RootFindConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub delta_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("dataset"),
            seed: 0,
            fields: FieldConfig::default(),
            rootfind: RootFindConfig::default(),
            train: TrainConfig::default(),
            render: RenderConfig::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            delta_enabled: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VolactError::Config(msg));
        if !(self.render.near > 0.0 && self.render.near < self.render.far) {
            return bad(format!(
                "render near/far must satisfy 0 < near < far, got {} / {}",
                self.render.near, self.render.far
            ));
        }
        if self.render.samples_per_ray == 0 {
            return bad("render.samples_per_ray must be at least 1".into());
        }
        if self.synth.n_poses == 0 || self.synth.n_cameras == 0 {
            return bad("synth needs at least one pose and one camera".into());
        }
        if self.synth.width == 0 || self.synth.height == 0 {
            return bad("synth image size must be at least 1x1".into());
        }
        if self.split.k_clusters == 0 {
            return bad("split.k_clusters must be at least 1".into());
        }
        if self.train.rays_per_batch == 0 || self.train.grad_chunks == 0 {
            return bad("train.rays_per_batch and train.grad_chunks must be at least 1".into());
        }
        if !(self.train.lr_start > 0.0 && self.train.lr_end > 0.0) && self.train.lr_start != 0.0 {
            return bad("train learning rates must be positive (or lr_start 0 to freeze)".into());
        }
        Ok(())
    }
}

/// Apply one `path.to.key=value` override onto a JSON tree. The value is
/// parsed as JSON when possible and kept as a string otherwise.
fn apply_set(tree: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| VolactError::Config(format!("--set needs key=value, got '{spec}'")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut node = tree;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            VolactError::Config(format!("--set path '{path}' crosses a non-object"))
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one key");
}

/// Load a config file (or defaults when `path` is None), apply `--set`
/// overrides in order, and validate.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut tree = match path {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => serde_json::to_value(RunConfig::default())?,
    };
    for spec in sets {
        apply_set(&mut tree, spec)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| VolactError::Config(format!("bad run config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
