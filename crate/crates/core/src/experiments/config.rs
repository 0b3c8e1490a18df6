use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::robustness::RobustnessConfig;
use crate::error::{Error, Result};
use crate::graph::synthetic::{
    binarize_at_median, generate_additive_task, generate_localized_task, SyntheticConfig,
};
use crate::graph::{Dataset, DEFAULT_FRACTIONS};
use crate::message_passing::{ConvKind, NODE_DIM};
use crate::model::{ModelFamily, ModelSpec};
use crate::readouts::{ReadoutKind, ReadoutParams};
use crate::training::TrainConfig;
use crate::vgae::VgaeConfig;

/// Reads a JSON config. Relative paths inside it are later resolved
/// against the config file's directory.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `path` unchanged if absolute, otherwise joined onto `base`.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn default_depth() -> usize {
    2
}
fn default_hidden() -> usize {
    NODE_DIM
}
fn default_true() -> bool {
    true
}
fn default_fractions() -> [f64; 3] {
    DEFAULT_FRACTIONS
}

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub conv: ConvKind,
    pub readout: ReadoutKind,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_true")]
    pub conv_bias: bool,
    #[serde(default)]
    pub readout_params: ReadoutParams,
    #[serde(default)]
    pub family: ModelFamily,
    #[serde(default)]
    pub vgae: VgaeConfig,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    /// Graph id whose embedding is recorded every epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            conv: self.conv,
            readout: self.readout,
            depth: self.depth,
            hidden: self.hidden,
            conv_bias: self.conv_bias,
            readout_params: self.readout_params.clone(),
            family: self.family,
            vgae: self.vgae.clone(),
        }
    }
}

/// Grid of runs: every (dataset, conv, readout, depth, heads, seed) cell
/// trains independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub datasets: Vec<PathBuf>,
    pub convs: Vec<ConvKind>,
    pub readouts: Vec<ReadoutKind>,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    /// Attention head counts; only varied for set-transformer readouts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<usize>>,
    /// Each seed drives both the split and the training run.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub readout_params: ReadoutParams,
    #[serde(default)]
    pub family: ModelFamily,
    #[serde(default = "default_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_depths() -> Vec<usize> {
    vec![2]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl SweepSpec {
    pub fn new(datasets: Vec<PathBuf>, convs: Vec<ConvKind>, readouts: Vec<ReadoutKind>) -> Self {
        SweepSpec {
            datasets,
            convs,
            readouts,
            depths: default_depths(),
            heads: None,
            seeds: default_seeds(),
            hidden: default_hidden(),
            readout_params: ReadoutParams::default(),
            family: ModelFamily::Gnn,
            split_fractions: DEFAULT_FRACTIONS,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("datasets", self.datasets.len()),
            ("convs", self.convs.len()),
            ("readouts", self.readouts.len()),
            ("depths", self.depths.len()),
            ("seeds", self.seeds.len()),
        ];
        if let Some((name, _)) = axes.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidArgument(format!(
                "sweep axis {name} is empty"
            )));
        }
        if self
            .heads
            .as_ref()
            .is_some_and(|h| h.is_empty() || h.contains(&0))
        {
            return Err(Error::InvalidArgument(
                "heads must be a nonempty list of positive counts".into(),
            ));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    /// A model saved by `train`.
    pub path: PathBuf,
}

/// Permutation-robustness study over saved models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSpec {
    pub dataset: PathBuf,
    pub models: Vec<ModelRef>,
    #[serde(flatten)]
    pub settings: RobustnessConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Localized,
    Additive,
}

/// Synthetic dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: SyntheticTask,
    #[serde(flatten)]
    pub synthetic: SyntheticConfig,
    /// Threshold targets at the median for a binary classification task.
    #[serde(default)]
    pub binarize: bool,
}

impl GenConfig {
    pub fn generate(&self) -> Result<Dataset> {
        let ds = match self.task {
            SyntheticTask::Localized => generate_localized_task(&self.synthetic)?,
            SyntheticTask::Additive => generate_additive_task(&self.synthetic)?,
        };
        if self.binarize {
            binarize_at_median(ds)
        } else {
            Ok(ds)
        }
    }
}
