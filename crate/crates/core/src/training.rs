//! Maximum-likelihood meta-training with Adam on a fresh stream of tasks.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamConfig, Array, DiffError, Graph, ParameterStore};
use crate::metrics::EvalSummary;
use crate::models::{nll_loss, Model, ModelError};
use crate::rng::derive_seed;
use crate::synth::{sample_task, Process, SynthError, Task, TaskSampling};

/// Seed streams. Each purpose draws task seeds from its own stream so that
/// training, validation and evaluation tasks never coincide.
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_VALIDATION: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} on task seed {task_seed}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        task_seed: u64,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Set by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub validation_tasks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batches_per_epoch: 256,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 1e-5,
            seed: 0,
            early_stop_patience: 15,
            validation_tasks: 128,
        }
    }
}

impl TrainConfig {
    /// Scaled-down schedule that finishes in minutes on one core.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batches_per_epoch: 64,
            batch_size: 4,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches_per_epoch and batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.validation_tasks == 0 {
            return bad("validation_tasks must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Infinite supply of synthetic tasks addressed by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSource {
    pub process: Process,
    pub sampling: TaskSampling,
}

impl TaskSource {
    pub fn new(process: Process) -> Self {
        let sampling = process.default_sampling();
        Self { process, sampling }
    }

    pub fn task(&self, seed: u64) -> Result<Task, SynthError> {
        sample_task(&self.process, &self.sampling, seed)
    }

    /// `n` tasks drawn from `stream` of `seed`, in index order.
    pub fn tasks(&self, seed: u64, stream: u64, n: usize) -> Result<Vec<Task>, SynthError> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.task(derive_seed(seed, stream, i)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_ll: f64,
    pub seconds: f64,
    pub param_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation LL of the initial parameters.
    pub initial_val_ll: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,val_ll,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_nll, e.val_ll, e.seconds));
        }
        out
    }

    /// The log without wall-clock fields, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut log = self.clone();
        for e in &mut log.epochs {
            e.seconds = 0.0;
        }
        log
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the highest validation LL seen (initial ones included).
    pub best: ParameterStore,
    pub last: ParameterStore,
    pub log: TrainLog,
}

/// NLL and parameter gradients for one task.
pub fn task_gradients<M: Model + ?Sized>(
    model: &M,
    params: &ParameterStore,
    task: &Task,
) -> Result<(f64, Vec<(String, Array)>), ModelError> {
    let mut g = Graph::new();
    let pred = model.forward(&mut g, params, task)?;
    let loss = nll_loss(&mut g, &pred, task)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.param_gradients(loss)?))
}

/// Per-task (mean target LL, MSE) pairs, in task order.
pub fn task_scores<M: Model + ?Sized>(model: &M, params: &ParameterStore, tasks: &[Task]) -> Result<Vec<(f64, f64)>, ModelError> {
    tasks
        .par_iter()
        .map(|task| {
            if task.target.is_empty() {
                return Err(ModelError::InvalidTask("evaluation task has no targets".into()));
            }
            let pred = model.predict(params, task)?;
            let ys = task.target_ys_by_dim();
            Ok((pred.mean_log_likelihood(&ys), pred.mean_squared_error(&ys)))
        })
        .collect()
}

pub fn evaluate<M: Model + ?Sized>(model: &M, params: &ParameterStore, tasks: &[Task]) -> Result<EvalSummary, ModelError> {
    if tasks.is_empty() {
        return Err(ModelError::InvalidInput("evaluate: no tasks".into()));
    }
    let (lls, mses): (Vec<f64>, Vec<f64>) = task_scores(model, params, tasks)?.into_iter().unzip();
    Ok(EvalSummary::from_tasks(&lls, &mses))
}

/// Train `model` from its seed-determined initialisation.
pub fn train<M: Model + ?Sized>(model: &M, source: &TaskSource, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let params = model.init_params(derive_seed(cfg.seed, STREAM_INIT, 0))?;
    train_from(model, source, cfg, params)
}

/// Train starting from `params`. Batches use fresh tasks; validation uses a
/// fixed set drawn once from its own seed stream.
pub fn train_from<M: Model + ?Sized>(
    model: &M,
    source: &TaskSource,
    cfg: &TrainConfig,
    mut params: ParameterStore,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let adam = cfg.adam();
    let validation = source.tasks(cfg.seed, STREAM_VALIDATION, cfg.validation_tasks)?;
    let initial_val_ll = evaluate(model, &params, &validation)?.mean_ll;
    let mut log = TrainLog {
        initial_val_ll,
        ..TrainLog::default()
    };
    let mut best = params.clone();
    let mut best_ll = initial_val_ll;
    let mut since_best = 0;
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let base = (((epoch - 1) * cfg.batches_per_epoch + batch) * cfg.batch_size) as u64;
            let seeds: Vec<u64> = (0..cfg.batch_size as u64)
                .map(|i| derive_seed(cfg.seed, STREAM_TRAIN, base + i))
                .collect();
            let results: Vec<Result<(f64, Vec<(String, Array)>), TrainError>> = seeds
                .par_iter()
                .map(|&s| {
                    let task = source.task(s)?;
                    task_gradients(model, &params, &task).map_err(|e| match e {
                        ModelError::Diff(DiffError::NonFinite { op }) => TrainError::NonFinite {
                            epoch,
                            batch,
                            task_seed: s,
                            detail: format!("non-finite value in {op}"),
                        },
                        other => other.into(),
                    })
                })
                .collect();
            let mut batch_loss = 0.0;
            for (r, &s) in results.into_iter().zip(&seeds) {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch,
                        task_seed: s,
                        detail: format!("loss {loss}"),
                    });
                }
                batch_loss += loss;
                for (name, grad) in grads {
                    params.accumulate_grad(&name, &grad.map(|v| v * inv_batch))?;
                }
            }
            loss_sum += batch_loss / cfg.batch_size as f64;
            if cfg.lr > 0.0 {
                params.adam_step(&adam)?;
            } else {
                params.zero_grad();
            }
        }
        let val_ll = evaluate(model, &params, &validation)?.mean_ll;
        log.epochs.push(EpochLog {
            epoch,
            train_nll: loss_sum / cfg.batches_per_epoch as f64,
            val_ll,
            seconds: start.elapsed().as_secs_f64(),
            param_norm: params.value_norm(),
        });
        if val_ll > best_ll {
            best_ll = val_ll;
            best = params.clone();
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { best, last: params, log })
}
