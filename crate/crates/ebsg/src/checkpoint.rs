//! Training checkpoints.

use std::path::Path;

use ebsg_core::graph::LabelSpace;
use ebsg_core::params::NamedTensor;
use ebsg_core::training::{Mode, TrainConfig, TrainState};
use ebsg_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{label_space_hash, LoadedDataset};
use crate::error::{CliError, CliResult};
use crate::files::{read_json, write_json};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const LATEST: &str = "checkpoint.json";

pub fn epoch_file(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub values: Vec<f64>,
}

impl TensorEntry {
    fn from_named(t: &NamedTensor) -> Self {
        Self { name: t.name.clone(), shape: t.value.shape().to_vec(), values: t.value.data().to_vec() }
    }

    fn to_tensor(&self) -> CliResult<Tensor> {
        Tensor::new(self.shape.clone(), self.values.clone())
            .map_err(|e| CliError::Config(format!("tensor {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub kind: String,
    pub lr: f64,
    pub step: u64,
}

/// All streams are derived from `seed` and the epoch/position counters, so
/// the next epoch index is the whole generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub kind: String,
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mode: Mode,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub label_space: LabelSpace,
    pub label_space_hash: String,
    pub feature_width: usize,
    /// Training config without `epochs`, which only bounds the run.
    pub config: Value,
    pub tensors: Vec<TensorEntry>,
    pub frequency_bias: Option<TensorEntry>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    /// Predicts the ground truth exactly; a fixture for checking metrics.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oracle: bool,
}

/// `cfg` as stored in checkpoints.
pub fn config_identity(cfg: &TrainConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("serializable config");
    if let Value::Object(map) = &mut v {
        map.remove("epochs");
    }
    v
}

impl Checkpoint {
    pub fn capture(state: &TrainState, cfg: &TrainConfig, ls: &LabelSpace) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            mode: state.mode,
            epoch: state.epoch,
            step: state.step,
            seed: state.seed,
            label_space: ls.clone(),
            label_space_hash: label_space_hash(ls),
            feature_width: state.predictor.feature_width,
            config: config_identity(cfg),
            tensors: state.named_tensors().iter().map(TensorEntry::from_named).collect(),
            frequency_bias: state.predictor.frequency_bias.as_ref().map(|t| TensorEntry {
                name: "frequency_bias".into(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            }),
            optimizer: OptimizerState { kind: "sgd".into(), lr: cfg.lr, step: state.step },
            rng: RngState { kind: "derived".into(), seed: state.seed, next_epoch: state.epoch },
            oracle: false,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let ckpt: Self = read_json(path)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_value(self.config.clone())
            .map_err(|e| CliError::Config(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Label-space compatibility with a dataset.
    pub fn check_data(&self, data: &LoadedDataset) -> CliResult<()> {
        if self.label_space_hash != data.header.label_space_hash {
            return Err(CliError::Config(format!(
                "label space mismatch: checkpoint {} vs data {}",
                self.label_space_hash, data.header.label_space_hash
            )));
        }
        if !self.oracle && self.feature_width != data.header.feature_width {
            return Err(CliError::Config(format!(
                "feature width mismatch: checkpoint {} vs data {}",
                self.feature_width, data.header.feature_width
            )));
        }
        Ok(())
    }

    /// Rebuilds the training state.
    pub fn restore(&self) -> CliResult<TrainState> {
        if self.oracle {
            return Err(CliError::Config("oracle checkpoints carry no parameters".into()));
        }
        let cfg = self.train_config()?;
        if cfg.mode != self.mode || cfg.seed != self.seed {
            return Err(CliError::Config("checkpoint header disagrees with its config".into()));
        }
        let bias = self.frequency_bias.as_ref().map(TensorEntry::to_tensor).transpose()?;
        let (d, dp) = (self.label_space.num_objects(), self.label_space.num_predicates());
        let mut state = TrainState::init(&cfg, d, dp, self.feature_width, bias)?;
        let tensors = self
            .tensors
            .iter()
            .map(|t| Ok(NamedTensor { name: t.name.clone(), value: t.to_tensor()? }))
            .collect::<CliResult<Vec<_>>>()?;
        state.load_tensors(&tensors)?;
        state.epoch = self.epoch;
        state.step = self.step;
        Ok(state)
    }
}
