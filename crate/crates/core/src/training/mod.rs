//! Optimiser, losses, metrics and the per-run training loop.

mod adam;
pub mod metrics;
mod trainer;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use trainer::{
    evaluate, train_run, MetricsRecord, ProbeTrace, RunOptions, RunOutcome, RunStatus, TargetScale,
    TestMetrics, TrainedModel,
};

use crate::error::{Error, Result};
use crate::graph::{DatasetMeta, TaskKind};
use crate::nn::Ctx;
use crate::tensor::{Precision, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    BceLogits,
    CrossEntropy,
}

impl LossKind {
    /// MSE for regression, BCE for binary and cross-entropy for multi-class
    /// classification.
    pub fn default_for(meta: &DatasetMeta) -> LossKind {
        match meta.task {
            TaskKind::Regression => LossKind::Mse,
            TaskKind::Classification if meta.is_multiclass() => LossKind::CrossEntropy,
            TaskKind::Classification => LossKind::BceLogits,
        }
    }

    /// Mean loss of `pred` against `target` (one row per graph).
    pub fn apply(self, ctx: &mut Ctx, pred: Var, target: &Tensor) -> Result<Var> {
        match self {
            LossKind::Mse => ctx.tape.mse(pred, target),
            LossKind::Mae => ctx.tape.mae(pred, target),
            LossKind::BceLogits => ctx.tape.bce_logits(pred, target),
            LossKind::CrossEntropy => {
                let classes = target
                    .data()
                    .iter()
                    .map(|&c| {
                        if c < 0.0 || c.fract() != 0.0 {
                            Err(Error::InvalidArgument(format!(
                                "class label {c} is not a class index"
                            )))
                        } else {
                            Ok(c as usize)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                ctx.tape.cross_entropy(pred, &classes)
            }
        }
    }
}

fn default_epochs() -> usize {
    1000
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    30
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the task's natural loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub precision: Precision,
    /// Regression targets are trained in units of the training split's
    /// standard deviation; metrics are reported in original units.
    #[serde(default = "default_true")]
    pub standardize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch: default_batch(),
            lr: default_lr(),
            patience: default_patience(),
            seed: 0,
            loss: None,
            precision: Precision::F64,
            standardize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}
