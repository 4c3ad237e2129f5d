//! Run configuration files and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use winnorm::error::{Error, Result};
use winnorm::model::{CnnSpec, StageSpec};
use winnorm::norm::NormConfig;
use winnorm::train::TrainConfig;

/// Model section of a run config: the architecture without the
/// normalization choice, which lives in the top-level `norm` section and
/// is applied to every stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_input_dims")]
    pub input_dims: (usize, usize),
    #[serde(default = "d_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "d_patch_dims")]
    pub patch_dims: (usize, usize),
    #[serde(default = "d_channels")]
    pub stage_channels: Vec<usize>,
    /// Stride-2 flags per stage; defaults to all true.
    #[serde(default)]
    pub downsample: Option<Vec<bool>>,
    pub init_seed: u64,
    #[serde(default)]
    pub share_window_across_layers: bool,
}

fn d_input_dims() -> (usize, usize) {
    (32, 32)
}
fn d_in_channels() -> usize {
    3
}
fn d_patch_dims() -> (usize, usize) {
    (8, 8)
}
fn d_channels() -> Vec<usize> {
    vec![32, 64, 128]
}

impl ModelSection {
    pub fn to_cnn_spec(&self, norm: &NormConfig) -> Result<CnnSpec> {
        let downsample = match &self.downsample {
            Some(v) => {
                if v.len() != self.stage_channels.len() {
                    return Err(Error::InvalidConfig(
                        "downsample list must match stage_channels".into(),
                    ));
                }
                v.clone()
            }
            None => vec![true; self.stage_channels.len()],
        };
        Ok(CnnSpec {
            input_dims: self.input_dims,
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            patch_dims: self.patch_dims,
            stages: self
                .stage_channels
                .iter()
                .zip(downsample)
                .map(|(&out_channels, ds)| StageSpec {
                    out_channels,
                    norm: norm.clone(),
                    downsample: ds,
                })
                .collect(),
            init_seed: self.init_seed,
            share_window_across_layers: self.share_window_across_layers,
        })
    }
}

/// One training run, fully specified. Unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub run_id: Option<String>,
    pub data: PathBuf,
    #[serde(default = "d_site")]
    pub train_site: String,
    pub out: PathBuf,
    pub norm: NormConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

fn d_site() -> String {
    "A".into()
}

impl RunConfigFile {
    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            format!("run_seed{}", self.train.seed)
        })
    }
}

/// Parse `KEY=VALUE`; the value is read as JSON when possible, else as a
/// bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, serde_json::Value)> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override '{spec}' is not KEY=VALUE")))?;
    if key.is_empty() {
        return Err(Error::InvalidConfig(format!("override '{spec}' has an empty key")));
    }
    let parsed = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), parsed))
}

fn set_path(doc: &mut serde_json::Value, path: &[String], value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    for (i, part) in path.iter().enumerate() {
        let last = i == path.len() - 1;
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override path '{}' hits a non-object", path.join(".")))
        })?;
        if last {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.clone())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Load a run config, apply `--override KEY=VAL` entries, and parse it
/// strictly. `seed=N` is shorthand for `train.seed=N`.
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfigFile> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut doc: serde_json::Value = serde_json::from_str(&body)?;
    for spec in overrides {
        let (mut key, value) = parse_override(spec)?;
        if key.len() == 1 && key[0] == "seed" {
            key = vec!["train".into(), "seed".into()];
        }
        set_path(&mut doc, &key, value)?;
    }
    let cfg: RunConfigFile = serde_json::from_value(doc)?;
    cfg.norm.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}
