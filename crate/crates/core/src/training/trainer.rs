use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, mcc, mean_absolute_error, r_squared};
use super::{Adam, LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{Dataset, Graph, SplitSpec, TaskKind};
use crate::model::{GraphModel, ModelSpec};
use crate::nn::{Ctx, Mode, Params};
use crate::tensor::{Precision, Tensor};

/// Graphs per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Per-task affine map between original and training units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetScale {
    /// Mean and population standard deviation of each target column.
    pub fn fit(graphs: &[&Graph]) -> Self {
        let t = graphs[0].targets().len();
        let n = graphs.len() as f64;
        let mean: Vec<f64> = (0..t)
            .map(|j| graphs.iter().map(|g| g.targets()[j]).sum::<f64>() / n)
            .collect();
        let std = (0..t)
            .map(|j| {
                let var = graphs
                    .iter()
                    .map(|g| (g.targets()[j] - mean[j]).powi(2))
                    .sum::<f64>()
                    / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        TargetScale { mean, std }
    }

    pub fn forward(&self, t: &Tensor) -> Tensor {
        self.map(t, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, t: &Tensor) -> Tensor {
        self.map(t, |v, m, s| v * s + m)
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, self.mean[i % c], self.std[i % c]);
        }
        out
    }
}

/// A model with trained parameters, ready for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: GraphModel,
    pub params: Params,
    pub scale: Option<TargetScale>,
    pub loss: LossKind,
    pub precision: Precision,
}

impl TrainedModel {
    /// Eval-mode outputs in original target units, and graph embeddings.
    pub fn predict(&self, graphs: &[&Graph]) -> Result<(Tensor, Tensor)> {
        let (y, e) = self.model.predict(&self.params, graphs, self.precision)?;
        Ok((self.scale.as_ref().map_or(y.clone(), |s| s.inverse(&y)), e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub loss: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub mcc: Option<f64>,
    pub auroc: Option<f64>,
}

/// Eval-mode embedding of one graph after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub graph_id: String,
    pub embeddings: Vec<Vec<f64>>,
}

/// Everything recorded about one training run. Contains no wall-clock
/// data, so equal inputs serialise to equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub test: TestMetrics,
    pub probe: Option<ProbeTrace>,
}

impl MetricsRecord {
    /// R² for regression and MCC for classification.
    pub fn headline(&self) -> Option<f64> {
        self.test.r2.or(self.test.mcc)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dataset_name: String,
    /// Graph id to snapshot each epoch; defaults to the first test graph.
    pub probe: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: MetricsRecord,
    /// Present for completed runs.
    pub trained: Option<TrainedModel>,
}

/// Eval-mode predictions (original units) and the mean loss on `graphs`.
pub fn evaluate(trained: &TrainedModel, graphs: &[&Graph]) -> Result<(Tensor, f64)> {
    let m = &trained.model;
    let mut preds = Vec::new();
    let mut total = 0.0;
    for chunk in graphs.chunks(EVAL_CHUNK) {
        let batch = m.batch(chunk)?;
        let mut ctx = Ctx::new(&trained.params, Mode::Eval, 0, trained.precision);
        let out = m.forward(&mut ctx, &batch)?;
        let target = trained
            .scale
            .as_ref()
            .map_or(batch.targets.clone(), |s| s.forward(&batch.targets));
        let mut loss = trained.loss.apply(&mut ctx, out.output, &target)?;
        if let Some(aux) = out.aux_loss {
            loss = ctx.tape.add(loss, aux)?;
        }
        total += ctx.tape.scalar(loss) * chunk.len() as f64;
        preds.extend_from_slice(ctx.tape.value(out.output).data());
    }
    let cols = m.meta.output_dim();
    let y = Tensor::matrix(graphs.len(), cols, preds)?;
    let y = trained.scale.as_ref().map_or(y.clone(), |s| s.inverse(&y));
    Ok((y, total / graphs.len() as f64))
}

fn test_metrics(trained: &TrainedModel, graphs: &[&Graph]) -> Result<TestMetrics> {
    let (pred, loss) = evaluate(trained, graphs)?;
    let meta = &trained.model.meta;
    let truth: Vec<f64> = graphs
        .iter()
        .flat_map(|g| g.targets().iter().copied())
        .collect();
    let mut m = TestMetrics {
        loss: Some(loss),
        ..TestMetrics::default()
    };
    match meta.task {
        TaskKind::Regression => {
            m.mae = Some(mean_absolute_error(pred.data(), &truth)?);
            m.r2 = r_squared(pred.data(), &truth)?;
        }
        TaskKind::Classification if meta.is_multiclass() => {
            let labels: Vec<usize> = (0..pred.rows())
                .map(|i| {
                    let row = pred.row_slice(i);
                    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect();
            let truth: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
            m.mcc = Some(mcc(&labels, &truth)?);
        }
        TaskKind::Classification => {
            let labels: Vec<usize> = pred.data().iter().map(|&s| usize::from(s > 0.0)).collect();
            let truth_bin: Vec<bool> = truth.iter().map(|&t| t > 0.5).collect();
            let truth_lab: Vec<usize> = truth_bin.iter().map(|&b| usize::from(b)).collect();
            m.mcc = Some(mcc(&labels, &truth_lab)?);
            m.auroc = auroc(pred.data(), &truth_bin)?;
        }
    }
    Ok(m)
}

fn select<'a>(ds: &'a Dataset, idx: &[usize]) -> Result<Vec<&'a Graph>> {
    idx.iter()
        .map(|&i| {
            ds.graphs.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("split index {i} outside dataset of {}", ds.len()))
            })
        })
        .collect()
}

enum Stop {
    Finished,
    Diverged(String),
}

/// Trains one model with Adam, early stopping on validation loss and
/// restoration of the best parameters, then scores the test split.
///
/// Configuration problems are errors. Numerical divergence is not: it
/// yields a record with status `failed` and the cause.
pub fn train_run(
    spec: &ModelSpec,
    ds: &Dataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let train = select(ds, &split.train)?;
    let val = select(ds, &split.val)?;
    let test = select(ds, &split.test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(
            "train and test splits must be nonempty".into(),
        ));
    }
    // without a validation split, stop on training loss
    let val = if val.is_empty() { train.clone() } else { val };
    let probe = match &opts.probe {
        Some(id) => Some(
            ds.find(id)
                .ok_or_else(|| Error::Missing(format!("probe graph {id:?}")))?,
        ),
        None => Some(test[0]),
    };

    let (model, mut params) = GraphModel::build(spec, &ds.meta, cfg.seed)?;
    params.round_to(cfg.precision);
    let loss_kind = cfg.loss.unwrap_or_else(|| LossKind::default_for(&ds.meta));
    let scale = (ds.meta.task == TaskKind::Regression && cfg.standardize_targets)
        .then(|| TargetScale::fit(&train));
    let mut trained = TrainedModel {
        model,
        params: Params::new(),
        scale,
        loss: loss_kind,
        precision: cfg.precision,
    };

    let mut record = MetricsRecord {
        dataset: opts.dataset_name.clone(),
        model: spec.clone(),
        train: cfg.clone(),
        split_seed: split.seed,
        status: RunStatus::Completed,
        failure: None,
        epochs_run: 0,
        best_epoch: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        test: TestMetrics::default(),
        probe: probe.map(|g| ProbeTrace {
            graph_id: g.id().to_string(),
            embeddings: Vec::new(),
        }),
    };

    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut bad_epochs = 0;
    let mut stop = Stop::Finished;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| train[i]).collect();
            let batch = trained.model.batch(&graphs)?;
            let target = trained
                .scale
                .as_ref()
                .map_or(batch.targets.clone(), |s| s.forward(&batch.targets));
            let step = (|| -> Result<(f64, Vec<_>, Vec<_>)> {
                let mut ctx = Ctx::new(&params, Mode::Train, rng.random(), cfg.precision);
                let out = trained.model.forward(&mut ctx, &batch)?;
                let mut loss = loss_kind.apply(&mut ctx, out.output, &target)?;
                if let Some(aux) = out.aux_loss {
                    loss = ctx.tape.add(loss, aux)?;
                }
                let grads = ctx.tape.backward(loss);
                Ok((
                    ctx.tape.scalar(loss),
                    ctx.param_grads(&grads),
                    ctx.take_buffer_updates(),
                ))
            })();
            let (loss, grads, buffers) = match step {
                Ok(s) => s,
                Err(Error::NonFinite { op }) => {
                    stop = Stop::Diverged(format!("non-finite value in {op} during epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Err(Error::NonFinite { op }) = adam.step(&mut params, &grads) {
                stop = Stop::Diverged(format!("non-finite {op} during epoch {epoch}"));
                break 'epochs;
            }
            for (id, value) in buffers {
                params.set(id, value)?;
            }
            params.round_to(cfg.precision);
            epoch_loss += loss * graphs.len() as f64;
        }
        record.epochs_run = epoch;
        record.train_loss.push(epoch_loss / train.len() as f64);

        trained.params = params.clone();
        let val_loss = match evaluate(&trained, &val) {
            Ok((_, l)) => l,
            Err(Error::NonFinite { op }) => {
                stop = Stop::Diverged(format!(
                    "non-finite value in {op} during validation of epoch {epoch}"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        record.val_loss.push(val_loss);
        if let (Some(trace), Some(g)) = (record.probe.as_mut(), probe) {
            let (_, e) = trained.model.predict(&params, &[g], cfg.precision)?;
            trace.embeddings.push(e.into_data());
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            record.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }

    if let Stop::Diverged(cause) = stop {
        record.status = RunStatus::Failed;
        record.failure = Some(cause);
        return Ok(RunOutcome {
            record,
            trained: None,
        });
    }
    trained.params = best_params;
    match test_metrics(&trained, &test) {
        Ok(m) => record.test = m,
        Err(Error::NonFinite { op }) => {
            record.status = RunStatus::Failed;
            record.failure = Some(format!("non-finite value in {op} on the test split"));
            return Ok(RunOutcome {
                record,
                trained: None,
            });
        }
        Err(e) => return Err(e),
    }
    Ok(RunOutcome {
        record,
        trained: Some(trained),
    })
}
