use serde::{Deserialize, Serialize};

/// One `(x, y)` pair with a vector output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub process: String,
    pub seed: u64,
}

/// Disjoint context and target sets drawn from one realisation of a process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub context: Vec<Observation>,
    pub target: Vec<Observation>,
    pub meta: TaskMeta,
}

impl Task {
    /// Output dimension, taken from the first observation (1 for an empty task).
    pub fn dim_y(&self) -> usize {
        self.context
            .iter()
            .chain(&self.target)
            .next()
            .map_or(1, |o| o.y.len())
    }

    pub fn context_xs(&self) -> Vec<f64> {
        self.context.iter().map(|o| o.x).collect()
    }

    pub fn target_xs(&self) -> Vec<f64> {
        self.target.iter().map(|o| o.x).collect()
    }

    /// Target outputs laid out as `(dim_y, n_target)`, row-major.
    pub fn target_ys_by_dim(&self) -> Vec<f64> {
        let d = self.dim_y();
        let n = self.target.len();
        let mut out = vec![0.0; d * n];
        for (j, o) in self.target.iter().enumerate() {
            for (i, &y) in o.y.iter().enumerate() {
                out[i * n + j] = y;
            }
        }
        out
    }

    /// The same task with every input shifted by `tau`.
    pub fn translated(&self, tau: f64) -> Task {
        let shift = |obs: &[Observation]| {
            obs.iter()
                .map(|o| Observation {
                    x: o.x + tau,
                    y: o.y.clone(),
                })
                .collect()
        };
        Task {
            context: shift(&self.context),
            target: shift(&self.target),
            meta: self.meta.clone(),
        }
    }

    /// Finite inputs and outputs with one output dimension throughout.
    pub fn validate(&self) -> Result<(), String> {
        let d = self.dim_y();
        for o in self.context.iter().chain(&self.target) {
            if !o.x.is_finite() || o.y.iter().any(|v| !v.is_finite()) {
                return Err(format!("non-finite observation at x = {}", o.x));
            }
            if o.y.len() != d {
                return Err(format!(
                    "output dimension {} differs from task dimension {d}",
                    o.y.len()
                ));
            }
        }
        if d == 0 {
            return Err("outputs must have at least one dimension".into());
        }
        Ok(())
    }
}
