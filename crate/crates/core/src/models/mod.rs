//! Predictive models: the off-grid ConvCNP, the on-grid ConvCNP and the
//! MLP-based CNP baseline.

mod cnn;
mod cnp;
mod convcnp;
mod ongrid;

use serde::{Deserialize, Serialize};

pub use cnn::{CnnSpec, CnnVariant, LayerSpec};
pub use cnp::Cnp;
pub use convcnp::ConvCnp;
pub use ongrid::{OnGridConvCnp, OnGridPrediction};

use crate::diff::{Array, DiffError, Graph, NodeId, ParameterStore};
use crate::synth::Task;

/// Scale entering the floor `0.1 * SIGMA_MIN + 0.9 * sigma`.
pub const SIGMA_MIN: f64 = 0.1;
const FLOOR_WEIGHT: f64 = 0.1;
/// Smallest predictive scale a floored model can emit.
pub const SIGMA_LOWER_BOUND: f64 = FLOOR_WEIGHT * SIGMA_MIN;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("{0}")]
    InvalidInput(String),
}

/// Per-target Gaussian predictions, stored dimension-major: entry
/// `d * n_targets + m` is output dimension `d` at target `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub dim_y: usize,
    pub n_targets: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn empty(dim_y: usize) -> Self {
        Self {
            dim_y,
            n_targets: 0,
            mean: Vec::new(),
            std: Vec::new(),
        }
    }

    /// Mean log density of `ys` (same layout) over all entries.
    pub fn mean_log_likelihood(&self, ys: &[f64]) -> f64 {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let n = self.mean.len();
        let total: f64 = (0..n)
            .map(|i| {
                let z = (ys[i] - self.mean[i]) / self.std[i];
                -half_log_2pi - self.std[i].ln() - 0.5 * z * z
            })
            .sum();
        total / n as f64
    }

    pub fn mean_squared_error(&self, ys: &[f64]) -> f64 {
        let n = self.mean.len();
        self.mean.iter().zip(ys).map(|(m, y)| (m - y) * (m - y)).sum::<f64>() / n as f64
    }
}

/// Graph nodes holding the predictive mean and scale, both `(dim_y, n_targets)`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionNodes {
    pub mean: NodeId,
    pub std: NodeId,
}

impl PredictionNodes {
    pub fn to_distribution(&self, g: &Graph) -> PredictiveDistribution {
        let mean = g.value(self.mean);
        let std = g.value(self.std);
        let (dim_y, n_targets) = match mean.shape() {
            [d, m] => (*d, *m),
            _ => (1, mean.len()),
        };
        PredictiveDistribution {
            dim_y,
            n_targets,
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        }
    }
}

/// A model mapping a task's context set to predictions at its targets.
pub trait Model: Send + Sync {
    fn name(&self) -> String;

    /// Freshly initialised parameters, deterministic in `seed`.
    fn init_params(&self, seed: u64) -> Result<ParameterStore, ModelError>;

    fn forward(&self, g: &mut Graph, params: &ParameterStore, task: &Task) -> Result<PredictionNodes, ModelError>;

    fn predict(&self, params: &ParameterStore, task: &Task) -> Result<PredictiveDistribution, ModelError> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, params, task)?;
        Ok(nodes.to_distribution(&g))
    }
}

/// `sigma_post = 0.1 * SIGMA_MIN + 0.9 * sigma` for an already positive
/// `sigma` (a softplus output or a positive combination of them).
pub(crate) fn apply_sigma_floor(g: &mut Graph, sigma: NodeId) -> Result<NodeId, DiffError> {
    let s = g.scale(sigma, 1.0 - FLOOR_WEIGHT)?;
    g.add_scalar(s, FLOOR_WEIGHT * SIGMA_MIN)
}

/// Negative mean Gaussian log density of the task's targets.
pub fn nll_loss(g: &mut Graph, pred: &PredictionNodes, task: &Task) -> Result<NodeId, ModelError> {
    if task.target.is_empty() {
        return Err(ModelError::InvalidTask("nll_loss: no target points".into()));
    }
    let shape = g.value(pred.mean).shape().to_vec();
    let ys = Array::new(shape, task.target_ys_by_dim()).map_err(ModelError::Diff)?;
    let y = g.constant(ys);
    let lp = g.gaussian_log_pdf(y, pred.mean, pred.std)?;
    let m = g.mean(lp)?;
    Ok(g.scale(m, -1.0)?)
}

fn check_task(task: &Task, dim_y: usize) -> Result<(), ModelError> {
    task.validate().map_err(ModelError::InvalidTask)?;
    if task.dim_y() != dim_y {
        return Err(ModelError::InvalidTask(format!(
            "task has {} outputs, model expects {dim_y}",
            task.dim_y()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Observation, TaskMeta};

    fn task_with_targets(ys: &[f64]) -> Task {
        Task {
            context: vec![],
            target: ys
                .iter()
                .enumerate()
                .map(|(i, &y)| Observation {
                    x: i as f64,
                    y: vec![y],
                })
                .collect(),
            meta: TaskMeta {
                process: "test".into(),
                seed: 0,
            },
        }
    }

    fn nll_for(ys: &[f64], mean: &[f64], std: &[f64]) -> f64 {
        let task = task_with_targets(ys);
        let mut g = Graph::new();
        let n = ys.len();
        let pred = PredictionNodes {
            mean: g.constant(Array::matrix(1, n, mean.to_vec()).unwrap()),
            std: g.constant(Array::matrix(1, n, std.to_vec()).unwrap()),
        };
        let loss = nll_loss(&mut g, &pred, &task).unwrap();
        g.value(loss).data()[0]
    }

    #[test]
    fn nll_at_mean_with_unit_scale() {
        let v = nll_for(&[0.3, -1.0], &[0.3, -1.0], &[1.0, 1.0]);
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn doubling_scale_adds_log_two() {
        let a = nll_for(&[0.5], &[0.5], &[0.7]);
        let b = nll_for(&[0.5], &[0.5], &[1.4]);
        assert!((b - a - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_requires_targets() {
        let task = task_with_targets(&[]);
        let mut g = Graph::new();
        let pred = PredictionNodes {
            mean: g.constant(Array::zeros(&[1, 0])),
            std: g.constant(Array::zeros(&[1, 0])),
        };
        assert!(nll_loss(&mut g, &pred, &task).is_err());
    }

    #[test]
    fn distribution_log_likelihood_matches_loss() {
        let d = PredictiveDistribution {
            dim_y: 1,
            n_targets: 2,
            mean: vec![0.1, 0.2],
            std: vec![0.5, 2.0],
        };
        let ys = [0.4, -1.0];
        assert!((d.mean_log_likelihood(&ys) + nll_for(&ys, &d.mean, &d.std)).abs() < 1e-12);
    }

    #[test]
    fn floor_bounds_scale_below() {
        let mut g = Graph::new();
        let s = g.constant(Array::vector(vec![0.0, 1e-300, 3.0]));
        let f = apply_sigma_floor(&mut g, s).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v >= 0.01));
        assert!((g.value(f).data()[2] - (0.01 + 2.7)).abs() < 1e-12);
    }
}
