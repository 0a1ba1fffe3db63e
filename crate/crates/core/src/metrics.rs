//! Aggregation of per-task scores into means and standard errors.

use serde::{Deserialize, Serialize};

/// Mean log-likelihood and MSE over a set of tasks, each task contributing
/// its mean over target points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_tasks: usize,
    pub mean_ll: f64,
    pub stderr_ll: f64,
    pub mse: f64,
    pub stderr_mse: f64,
}

/// Sample mean and standard error of the mean (zero for fewer than two values).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

impl EvalSummary {
    pub fn from_tasks(lls: &[f64], mses: &[f64]) -> Self {
        let (mean_ll, stderr_ll) = mean_stderr(lls);
        let (mse, stderr_mse) = mean_stderr(mses);
        Self {
            n_tasks: lls.len(),
            mean_ll,
            stderr_ll,
            mse,
            stderr_mse,
        }
    }
}

/// Spread of the mean log-likelihood across independent runs (seeds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n_runs: usize,
    pub mean_ll: f64,
    pub seed_stderr_ll: f64,
    /// Root mean square of the per-run task standard errors.
    pub task_stderr_ll: f64,
}

pub fn aggregate_runs(runs: &[EvalSummary]) -> RunAggregate {
    let lls: Vec<f64> = runs.iter().map(|r| r.mean_ll).collect();
    let (mean_ll, seed_stderr_ll) = mean_stderr(&lls);
    let task_stderr_ll = (runs.iter().map(|r| r.stderr_ll * r.stderr_ll).sum::<f64>() / runs.len().max(1) as f64).sqrt();
    RunAggregate {
        n_runs: runs.len(),
        mean_ll,
        seed_stderr_ll,
        task_stderr_ll,
    }
}
