//! Meta-training on prior tasks: masked cross entropy, AdamW, gradient
//! aggregation, validation on held-out prior tasks and checkpointing.

mod checkpoint;
mod loss;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use loss::cross_entropy_masked;
pub use optim::{adamw_step, clip_grad_norm, AdamState, AdamWConfig};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::predict_task;
use crate::model::PfnModel;
use crate::prior::{sample_batch, PriorConfig, TabularTask};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Tape, Tensor};

/// Seed stream reserved for the validation tasks.
const VALIDATION_STREAM: u64 = u64::MAX;

/// Epochs in a row whose mean loss must exceed `10×` the first step's loss
/// before training is declared divergent.
pub const DIVERGENCE_EPOCHS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Tasks per micro-batch.
    pub batch_size: usize,
    /// Optimizer steps per epoch.
    pub steps_per_epoch: usize,
    pub epochs: usize,
    /// Micro-batches whose gradients are averaged into one optimizer step.
    pub aggregate_k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied to the aggregated gradient.
    pub grad_clip: Option<f64>,
    pub validation_tasks: usize,
    /// Where the best-validation checkpoint is written, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            steps_per_epoch: 32,
            epochs: 8,
            aggregate_k: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            validation_tasks: 32,
            checkpoint_path: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.aggregate_k == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return fail("batch_size, steps_per_epoch and aggregate_k_gradients must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return fail("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// One row of the loss curve. `val_accuracy` is set on the last step of
/// every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    /// Step whose parameters were kept; 0 if no epoch finished.
    pub best_step: u64,
    pub best_val_accuracy: Option<f64>,
    pub optimizer: AdamState,
}

/// Loss of one task on its query rows, `weight`-scaled gradients added
/// into `grads` (in parameter order). Returns the unscaled loss.
pub fn accumulate_task_gradients(model: &PfnModel, task: &TabularTask, weight: f64, grads: &mut [Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let p = model.bind(&tape);
    let logits = model.forward(&p, &task.x, &task.masked_labels())?;
    let loss = cross_entropy_masked(&logits, task.query_targets(), task.num_classes)?;
    let value = loss.value().item()?;
    let g = tape.backward(&loss.scale(weight)?)?;
    for (acc, var) in grads.iter_mut().zip(p.vars()) {
        if let Some(gi) = g.get(var) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    Ok(value)
}

/// Mean loss and mean gradient over all tasks of several micro-batches.
pub fn aggregate_gradients(model: &PfnModel, micro_batches: &[Vec<TabularTask>]) -> Result<(f64, Vec<Tensor>)> {
    let total: usize = micro_batches.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Contract("no tasks to aggregate".into()));
    }
    let weight = 1.0 / total as f64;
    let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut loss = 0.0;
    for task in micro_batches.iter().flatten() {
        loss += accumulate_task_gradients(model, task, weight, &mut grads)?;
    }
    Ok((loss * weight, grads))
}

/// Fraction of query rows, pooled over tasks, whose most probable class is
/// the target.
pub fn query_accuracy(model: &PfnModel, tasks: &[TabularTask]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for task in tasks {
        let preds = predict_task(model, task)?;
        hit += preds.iter().zip(task.query_targets()).filter(|(p, &t)| p.argmax() == t).count();
        total += preds.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Fixed validation tasks for a training seed.
pub fn validation_tasks(prior: &PriorConfig, cfg: &TrainConfig) -> Result<Vec<TabularTask>> {
    sample_batch(
        &mut rng_from_seed(derive_seed(cfg.seed, VALIDATION_STREAM)),
        prior,
        cfg.validation_tasks,
    )
}

fn check_compatible(model: &PfnModel, prior: &PriorConfig) -> Result<()> {
    let mc = model.config();
    if prior.max_features > mc.max_features || prior.max_classes > mc.max_classes {
        return Err(Error::Config(format!(
            "prior draws up to {} features and {} classes but the model accepts {} and {}",
            prior.max_features, prior.max_classes, mc.max_features, mc.max_classes
        )));
    }
    prior.validate()
}

pub fn meta_train(model: &mut PfnModel, prior: &PriorConfig, cfg: &TrainConfig) -> Result<TrainReport> {
    meta_train_with(model, prior, cfg, |_| {})
}

/// Trains `model` in place and leaves it holding the parameters with the
/// best validation accuracy. `observe` sees every curve point as it is
/// produced.
///
/// Step `s` (1-based) draws micro-batch `j` from
/// `derive_seed(derive_seed(seed, s), j)`, so runs are reproducible and
/// independent of how the loop is scheduled.
pub fn meta_train_with(
    model: &mut PfnModel,
    prior: &PriorConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&CurvePoint),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, prior)?;
    let val = validation_tasks(prior, cfg)?;
    let adamw = cfg.adamw();
    let mut state = AdamState::new(model.params());
    let mut curve = Vec::with_capacity(cfg.total_steps());
    let mut best: Option<(f64, u64, Vec<Tensor>)> = None;
    let mut initial_loss = None;
    let mut diverging = 0;

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for s in 0..cfg.steps_per_epoch {
            let step = (epoch * cfg.steps_per_epoch + s + 1) as u64;
            let step_seed = derive_seed(cfg.seed, step);
            let micro = (0..cfg.aggregate_k)
                .map(|j| sample_batch(&mut rng_from_seed(derive_seed(step_seed, j as u64)), prior, cfg.batch_size))
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grads) = aggregate_gradients(model, &micro).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence(format!("step {step}: {e}")),
                e => e,
            })?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(model.params_mut(), &grads, &mut state, &adamw)?;
            initial_loss.get_or_insert(loss);
            epoch_loss += loss;
            let mut point = CurvePoint {
                step,
                loss,
                val_accuracy: None,
            };
            if s + 1 == cfg.steps_per_epoch {
                let acc = query_accuracy(model, &val)?;
                point.val_accuracy = Some(acc);
                if best.as_ref().is_none_or(|b| acc > b.0) {
                    best = Some((acc, step, model.params().tensors().to_vec()));
                    if let Some(path) = &cfg.checkpoint_path {
                        Checkpoint::from_model(model, step, cfg.seed, Some(&state)).save(path)?;
                    }
                }
            }
            observe(&point);
            curve.push(point);
        }
        let mean = epoch_loss / cfg.steps_per_epoch as f64;
        let limit = 10.0 * initial_loss.unwrap_or(f64::INFINITY);
        diverging = if mean > limit { diverging + 1 } else { 0 };
        if diverging >= DIVERGENCE_EPOCHS {
            return Err(Error::Divergence(format!(
                "mean loss {mean:.4} exceeded 10x the initial loss for {DIVERGENCE_EPOCHS} consecutive epochs (epoch {})",
                epoch + 1
            )));
        }
    }

    let (best_val_accuracy, best_step) = match best {
        Some((acc, step, params)) => {
            model.params_mut().tensors_mut().clone_from_slice(&params);
            (Some(acc), step)
        }
        None => (None, 0),
    };
    Ok(TrainReport {
        curve,
        best_step,
        best_val_accuracy,
        optimizer: state,
    })
}

/// Writes `step,loss,val_accuracy`; the accuracy cell is empty on steps
/// without validation.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "val_accuracy"])?;
    for p in curve {
        w.write_record([
            p.step.to_string(),
            format!("{:e}", p.loss),
            p.val_accuracy.map(|a| format!("{a:e}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| Error::Data(format!("{}: short curve row", path.display())))
            };
            let bad = |s: &str| Error::Data(format!("{}: bad number `{s}`", path.display()));
            let acc = num(2)?;
            Ok(CurvePoint {
                step: num(0)?.parse().map_err(|_| bad(num(0).unwrap()))?,
                loss: num(1)?.parse().map_err(|_| bad(num(1).unwrap()))?,
                val_accuracy: if acc.is_empty() { None } else { Some(acc.parse().map_err(|_| bad(acc))?) },
            })
        })
        .collect()
}
