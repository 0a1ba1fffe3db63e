//! Conditional neural process baseline: an MLP encoder whose per-point
//! representations are mean-pooled, and an MLP decoder applied to each
//! target input concatenated with the pooled representation.

use rand::Rng;
use rand_distr::Uniform;

use crate::diff::{Array, DiffError, Graph, NodeId, ParameterStore};
use crate::rng::{rng, Rng as SeededRng};
use crate::synth::Task;

use super::{apply_sigma_floor, check_task, Model, ModelError, PredictionNodes};

#[derive(Clone, Debug)]
pub struct Cnp {
    pub dim_y: usize,
    pub hidden: usize,
    /// Apply `0.01 + 0.9 * softplus(.)` to the scale; otherwise plain softplus.
    pub sigma_floor: bool,
}

impl Cnp {
    pub fn new(dim_y: usize) -> Self {
        Self {
            dim_y,
            hidden: 128,
            sigma_floor: true,
        }
    }

    fn encoder_widths(&self) -> [usize; 4] {
        [1 + self.dim_y, self.hidden, self.hidden, self.hidden]
    }

    fn decoder_widths(&self) -> [usize; 4] {
        [1 + self.hidden, self.hidden, self.hidden, 2 * self.dim_y]
    }
}

fn init_linear(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, r: &mut SeededRng) -> Result<(), DiffError> {
    let b = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
    let w = (0..fan_in * fan_out).map(|_| r.sample(dist)).collect();
    store.insert(format!("{name}.weight"), Array::matrix(fan_in, fan_out, w)?)?;
    let bias = (0..fan_out).map(|_| r.sample(dist)).collect();
    store.insert(format!("{name}.bias"), Array::vector(bias))
}

/// Three linear layers with ReLU between them (none after the last).
fn mlp(g: &mut Graph, store: &ParameterStore, prefix: &str, mut x: NodeId) -> Result<NodeId, DiffError> {
    for i in 1..=3 {
        let w = g.param(store, &format!("{prefix}.{i}.weight"))?;
        let b = g.param(store, &format!("{prefix}.{i}.bias"))?;
        x = g.matmul(x, w)?;
        x = g.add_bias(x, b)?;
        if i < 3 {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

impl Model for Cnp {
    fn name(&self) -> String {
        "cnp".into()
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore, ModelError> {
        let mut store = ParameterStore::new();
        let mut r = rng(seed);
        for (prefix, widths) in [("encoder", self.encoder_widths()), ("decoder", self.decoder_widths())] {
            for i in 0..3 {
                init_linear(&mut store, &format!("{prefix}.{}", i + 1), widths[i], widths[i + 1], &mut r)?;
            }
        }
        Ok(store)
    }

    fn forward(&self, g: &mut Graph, params: &ParameterStore, task: &Task) -> Result<PredictionNodes, ModelError> {
        check_task(task, self.dim_y)?;
        let n = task.context.len();
        let m = task.target.len();
        let pooled = if n == 0 {
            // Mean over an empty set is taken to be the zero representation.
            g.constant(Array::zeros(&[1, self.hidden]))
        } else {
            let rows: Vec<f64> = task
                .context
                .iter()
                .flat_map(|o| std::iter::once(o.x).chain(o.y.iter().copied()))
                .collect();
            let x = g.constant(Array::matrix(n, 1 + self.dim_y, rows)?);
            let r = mlp(g, params, "encoder", x)?;
            g.mean_rows(r)?
        };
        let rep = g.repeat(pooled, m)?;
        let xt = g.constant(Array::matrix(m, 1, task.target_xs())?);
        let dec_in = g.concat(&[xt, rep], 1)?;
        let out = mlp(g, params, "decoder", dec_in)?;
        let out = g.transpose(out)?;
        let mean = g.slice(out, 0, self.dim_y)?;
        let pre = g.slice(out, self.dim_y, self.dim_y)?;
        let std = g.softplus(pre)?;
        let std = if self.sigma_floor { apply_sigma_floor(g, std)? } else { std };
        Ok(PredictionNodes { mean, std })
    }
}
