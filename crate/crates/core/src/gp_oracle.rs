//! Exact GP posterior predictive under the generating kernel.

use nalgebra::{Cholesky, DVector, Dyn};
use rayon::prelude::*;

use crate::kernels::{jittered_cholesky, KernelSpec};
use crate::metrics::EvalSummary;
use crate::models::PredictiveDistribution;
use crate::synth::Task;

/// Variances below this are clamped before taking square roots.
pub const VARIANCE_CLAMP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("Cholesky factorisation failed after jitter escalation")]
    Cholesky,
    #[error("{0}")]
    InvalidTask(String),
}

#[derive(Clone, Debug)]
pub struct GpPosterior {
    pub kernel: KernelSpec,
    pub xs: Vec<f64>,
    pub noise: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    pub jitter: f64,
}

impl GpPosterior {
    /// Condition on `(xs, ys)` with observation noise standard deviation `noise`.
    pub fn new(kernel: KernelSpec, xs: &[f64], ys: &[f64], noise: f64) -> Result<Self, OracleError> {
        if xs.len() != ys.len() {
            return Err(OracleError::InvalidTask(format!("{} inputs but {} outputs", xs.len(), ys.len())));
        }
        if xs.is_empty() {
            return Ok(Self {
                kernel,
                xs: Vec::new(),
                noise,
                chol: None,
                alpha: DVector::zeros(0),
                jitter: 0.0,
            });
        }
        let mut k = kernel.gram(xs);
        for i in 0..xs.len() {
            k[(i, i)] += noise * noise;
        }
        let (chol, jitter) = jittered_cholesky(&k).ok_or(OracleError::Cholesky)?;
        let alpha = chol.solve(&DVector::from_column_slice(ys));
        Ok(Self {
            kernel,
            xs: xs.to_vec(),
            noise,
            chol: Some(chol),
            alpha,
            jitter,
        })
    }

    /// Predictive means and variances of noisy observations at `targets`.
    pub fn predict(&self, targets: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let prior: Vec<f64> = targets.iter().map(|&x| self.kernel.eval(x, x) + self.noise * self.noise).collect();
        let Some(chol) = &self.chol else {
            return (vec![0.0; targets.len()], prior);
        };
        let kc = self.kernel.cross(&self.xs, targets);
        let mean = kc.transpose() * &self.alpha;
        let v = chol.l().solve_lower_triangular(&kc).expect("triangular factor");
        let var = (0..targets.len())
            .map(|j| (prior[j] - v.column(j).norm_squared()).max(VARIANCE_CLAMP))
            .collect();
        (mean.as_slice().to_vec(), var)
    }

    /// Predictive distribution over a task's targets (single output).
    pub fn predict_task(kernel: &KernelSpec, task: &Task, noise: f64) -> Result<PredictiveDistribution, OracleError> {
        if task.dim_y() != 1 {
            return Err(OracleError::InvalidTask("the GP oracle needs single-output tasks".into()));
        }
        let ys: Vec<f64> = task.context.iter().map(|o| o.y[0]).collect();
        let post = Self::new(kernel.clone(), &task.context_xs(), &ys, noise)?;
        let (mean, var) = post.predict(&task.target_xs());
        Ok(PredictiveDistribution {
            dim_y: 1,
            n_targets: mean.len(),
            mean,
            std: var.into_iter().map(f64::sqrt).collect(),
        })
    }
}

/// Per-task mean target log-likelihood and MSE under the exact posterior.
pub fn gp_oracle_scores(kernel: &KernelSpec, tasks: &[Task]) -> Result<Vec<(f64, f64)>, OracleError> {
    tasks
        .par_iter()
        .map(|task| {
            if task.target.is_empty() {
                return Err(OracleError::InvalidTask("task has no targets".into()));
            }
            let pred = GpPosterior::predict_task(kernel, task, 0.0)?;
            let ys = task.target_ys_by_dim();
            Ok((pred.mean_log_likelihood(&ys), pred.mean_squared_error(&ys)))
        })
        .collect()
}

pub fn gp_oracle_ll(kernel: &KernelSpec, tasks: &[Task]) -> Result<EvalSummary, OracleError> {
    let scores = gp_oracle_scores(kernel, tasks)?;
    let (lls, mses): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
    Ok(EvalSummary::from_tasks(&lls, &mses))
}
