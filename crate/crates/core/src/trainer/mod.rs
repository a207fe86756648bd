//! Outer-loop training through the unrolled refinement.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{OptimizerKind, TrainConfig, CONFIG_KEYS};
pub use optim::{clip_global_norm, OptimizerState, ADAGRAD_EPS, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::time::Instant;

use thiserror::Error;

use crate::backbone::BackboneError;
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::ingest::{DatasetSplit, FieldSchema, SparseInstance};
use crate::model::{loss_and_gradients, GraphSpec, Model, ModelError};
use crate::parallel::map_indexed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite gradient in block {block} at index {index}")]
    NonFiniteGradient { block: usize, index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("training split is empty")]
    EmptyTrain,
    #[error(transparent)]
    Label(#[from] BackboneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Summed objective and gradient blocks of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    /// Objective averaged over the batch.
    pub loss: f64,
    /// Sum of per-instance task losses.
    pub task_loss_sum: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Contiguous near-equal cuts of `0..n` into at most `shards` non-empty pieces.
pub fn shard_ranges(n: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    let shards = shards.max(1).min(n.max(1));
    let (base, extra) = (n / shards, n % shards);
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        if len > 0 {
            out.push(start..start + len);
        }
        start += len;
    }
    out
}

/// Batch-mean objective and its exact gradients with respect to every
/// parameter block, through all unrolled refinement steps.
///
/// The batch is cut into `shards` pieces evaluated on up to `threads` workers;
/// shard results are summed in shard order, so the output depends on
/// `shards` but never on `threads`.
pub fn outer_gradients(
    model: &Model,
    spec: &GraphSpec,
    batch: &[&SparseInstance],
    shards: usize,
    threads: usize,
) -> Result<BatchGradients, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let scale = 1.0 / batch.len() as f64;
    let ranges = shard_ranges(batch.len(), shards);
    let parts = map_indexed(ranges.len(), threads, |i| loss_and_gradients(model, spec, &batch[ranges[i].clone()], scale));
    let mut loss = 0.0;
    let mut task_loss_sum = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for p in parts {
        let (l, task_losses, g) = p?;
        loss += l;
        task_loss_sum += task_losses.iter().sum::<f64>();
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok(BatchGradients {
        loss,
        task_loss_sum,
        grads: grads.expect("at least one shard"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// AUC for binary tasks, MSE for regression.
    pub val_metric: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,val_auc_or_mse,seconds";

    pub fn to_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.val_metric, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochLog>,
}

fn check_labels(data: &[SparseInstance], config: &TrainConfig) -> Result<(), TrainError> {
    for x in data {
        config.task.check_label(x.label)?;
    }
    Ok(())
}

/// Trains from a fresh initialization drawn from `config.seed`.
pub fn train(
    split: &DatasetSplit,
    schema: &FieldSchema,
    config: &TrainConfig,
    threads: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let model = Model::init(schema, config.k, &config.hidden, config.task, config.seed, config.init_scale)?;
    train_model(model, split, schema, config, threads, on_epoch)
}

/// Trains starting from `model`, keeping the parameters with the best
/// validation objective and stopping after `patience` epochs without improvement.
pub fn train_model(
    mut model: Model,
    split: &DatasetSplit,
    schema: &FieldSchema,
    config: &TrainConfig,
    threads: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    check_labels(&split.train, config)?;
    check_labels(&split.validation, config)?;
    if model.backbone.task != config.task {
        return Err(TrainError::Config("model task differs from config task".into()));
    }
    let spec = config.graph_spec();
    model.project();
    let mut opt = OptimizerState::new(config.optimizer, &model.block_sizes());
    let mut best: Option<(f64, usize, Model, OptimizerState)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut task_loss_sum = 0.0;
        for (bi, idx) in split.train_batches(epoch as u64).enumerate() {
            let batch: Vec<&SparseInstance> = idx.iter().map(|&i| &split.train[i]).collect();
            let mut g = outer_gradients(&model, &spec, &batch, config.shards, threads)?;
            if !g.loss.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: bi });
            }
            task_loss_sum += g.task_loss_sum;
            clip_global_norm(&mut g.grads, config.clip_norm);
            opt.step(&mut model.blocks_mut(), &g.grads, config.gamma)?;
            model.project();
            if !model.is_finite() {
                return Err(TrainError::Divergence { epoch, batch: bi });
            }
        }
        let train_loss = task_loss_sum / split.train.len() as f64;
        let (val_loss, val_metric) = if split.validation.is_empty() {
            (train_loss, f64::NAN)
        } else {
            let r: EvalReport = evaluate(&model, &spec, &split.validation, threads)?;
            (r.objective(), r.headline())
        };
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_metric,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);

        let improved = best.as_ref().is_none_or(|(b, ..)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.clone(), opt.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_val, best_epoch, model, opt) = best.unwrap_or((f64::NAN, 0, model, opt));
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            schema: schema.clone(),
            config: config.clone(),
            model,
            optimizer: opt,
            best_val,
            best_epoch,
        },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_ranges_cover() {
        assert_eq!(shard_ranges(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(shard_ranges(2, 5), vec![0..1, 1..2]);
        assert_eq!(shard_ranges(5, 1), vec![0..5]);
    }
}
