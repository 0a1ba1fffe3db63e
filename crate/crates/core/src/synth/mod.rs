//! Task generators: GP samples, sawtooth waves and Lotka-Volterra
//! trajectories, with the context/target split used for training.

mod gp;
pub mod lotka_volterra;
mod sawtooth;
mod task;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gp::gp_sample;
pub use lotka_volterra::{gillespie_lv, lv_to_task, sample_lv_task, LvConfig, Rejection, Trajectory};
pub use sawtooth::{sawtooth_sample, Sawtooth};
pub use task::{Observation, Task, TaskMeta};

use crate::kernels::KernelSpec;
use crate::rng::rng;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("Cholesky factorisation failed after jitter escalation")]
    Cholesky,
    #[error("no acceptable trajectory after {0} attempts")]
    Exhausted(usize),
    #[error("{0}")]
    InvalidConfig(String),
}

/// A data-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Process {
    Gp { kernel: KernelSpec },
    Sawtooth,
    LotkaVolterra {
        #[serde(default)]
        lv: LvConfig,
    },
}

impl Process {
    pub fn name(&self) -> String {
        match self {
            Process::Gp { kernel } => kernel.name().to_string(),
            Process::Sawtooth => "sawtooth".into(),
            Process::LotkaVolterra { .. } => "lotka_volterra".into(),
        }
    }

    pub fn dim_y(&self) -> usize {
        match self {
            Process::LotkaVolterra { .. } => 2,
            _ => 1,
        }
    }

    /// Default sampling protocol: inputs in `[-2, 2]`, set sizes uniform
    /// over `3..=50` (`3..=100` for the sawtooth).
    pub fn default_sampling(&self) -> TaskSampling {
        let n = match self {
            Process::Sawtooth => (3, 100),
            _ => (3, 50),
        };
        TaskSampling {
            x_range: (-2.0, 2.0),
            n_context: n,
            n_target: n,
            lattice: None,
        }
    }
}

/// Input range and inclusive set-size ranges for 1-D synthetic tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSampling {
    pub x_range: (f64, f64),
    pub n_context: (usize, usize),
    pub n_target: (usize, usize),
    /// When set, inputs are distinct points `lo + j / lattice` instead of
    /// continuous draws, for models that work on a pixel grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<f64>,
}

impl TaskSampling {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.x_range;
        let ok = lo.is_finite()
            && hi.is_finite()
            && lo < hi
            && self.n_context.0 >= 1
            && self.n_context.0 <= self.n_context.1
            && self.n_target.0 <= self.n_target.1
            && self.lattice.is_none_or(|d| d.is_finite() && d > 0.0 && self.lattice_points() >= self.n_context.1 + self.n_target.1);
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidConfig(format!("invalid task sampling {self:?}")))
        }
    }

    pub fn with_lattice(self, density: f64) -> Self {
        Self {
            lattice: Some(density),
            ..self
        }
    }

    /// Number of lattice points in the input range (0 without a lattice).
    pub fn lattice_points(&self) -> usize {
        self.lattice
            .map_or(0, |d| ((self.x_range.1 - self.x_range.0) * d + 1e-9).floor() as usize + 1)
    }

    pub fn shifted(&self, tau: f64) -> Self {
        Self {
            x_range: (self.x_range.0 + tau, self.x_range.1 + tau),
            ..*self
        }
    }
}

/// Sample one realisation and split it into disjoint context and target sets.
///
/// Draw order: context size, target size, inputs (context first), then the
/// realisation. Shifting `sampling.x_range` by `tau` with the same seed gives
/// the same task translated by `tau`. The LV process ignores `sampling` and
/// uses its own protocol.
pub fn sample_task(process: &Process, sampling: &TaskSampling, seed: u64) -> Result<Task, SynthError> {
    if let Process::LotkaVolterra { lv } = process {
        return sample_lv_task(lv, seed)
            .map(|s| s.task)
            .ok_or(SynthError::Exhausted(lv.max_attempts));
    }
    sampling.validate()?;
    let mut r = rng(seed);
    let n_context = r.random_range(sampling.n_context.0..=sampling.n_context.1);
    let n_target = r.random_range(sampling.n_target.0..=sampling.n_target.1);
    let (lo, hi) = sampling.x_range;
    let xs: Vec<f64> = match sampling.lattice {
        None => (0..n_context + n_target)
            .map(|_| lo + (hi - lo) * r.random::<f64>())
            .collect(),
        Some(d) => rand::seq::index::sample(&mut r, sampling.lattice_points(), n_context + n_target)
            .into_iter()
            .map(|j| lo + j as f64 / d)
            .collect(),
    };
    let ys: Vec<f64> = match process {
        Process::Gp { kernel } => gp_sample(kernel, &xs, r.random())?,
        Process::Sawtooth => {
            let wave = Sawtooth::sample(&mut r, 0.5 * (lo + hi));
            xs.iter().map(|&x| wave.eval(x)).collect()
        }
        Process::LotkaVolterra { .. } => unreachable!("handled above"),
    };
    let mut obs: Vec<Observation> = xs
        .into_iter()
        .zip(ys)
        .map(|(x, y)| Observation { x, y: vec![y] })
        .collect();
    let target = obs.split_off(n_context);
    Ok(Task {
        context: obs,
        target,
        meta: TaskMeta {
            process: process.name(),
            seed,
        },
    })
}
