//! Off-grid ConvCNP: embed the context on a uniform grid, run a CNN over the
//! grid, and read predictions out at arbitrary target inputs with a second
//! EQ basis `psi_rho`.

use crate::convdeepset::{embed_node, embedding_channels, make_grid, normalize_density_node, UniformGrid, DENSITY_EPS};
use crate::diff::{Array, Graph, ParameterStore};
use crate::kernels::LearnableEq;
use crate::rng::rng;
use crate::synth::Task;

use super::{apply_sigma_floor, check_task, CnnSpec, CnnVariant, LayerSpec, Model, ModelError, PredictionNodes};

const ENCODER_SCALE: &str = "encoder.log_length_scale";
const DECODER_SCALE: &str = "decoder.log_length_scale";
const CNN_PREFIX: &str = "cnn";

#[derive(Clone, Debug)]
pub struct ConvCnp {
    pub cnn: CnnSpec,
    /// Grid points per unit input length.
    pub density: f64,
    /// Grid extension beyond the data, in input units. Defaults to the CNN's
    /// receptive-field half width.
    pub margin: f64,
    /// Order of the power series applied to the outputs.
    pub multiplicity: usize,
    pub dim_y: usize,
    pub sigma_floor: bool,
    pub eps: f64,
}

impl ConvCnp {
    pub fn new(variant: CnnVariant, density: f64, dim_y: usize) -> Self {
        let multiplicity = 1;
        let cnn = CnnSpec::new(variant, 1, embedding_channels(dim_y, multiplicity), 2 * dim_y, false);
        let margin = cnn.receptive_half_width() as f64 / density;
        Self {
            cnn,
            density,
            margin,
            multiplicity,
            dim_y,
            sigma_floor: true,
            eps: DENSITY_EPS,
        }
    }

    pub fn with_sigma_floor(mut self, on: bool) -> Self {
        self.sigma_floor = on;
        self
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn with_depthwise_separable(mut self, on: bool) -> Self {
        self.cnn = self.cnn.with_depthwise_separable(on);
        self
    }

    /// Change the power-series order, resizing the CNN input accordingly.
    pub fn with_multiplicity(mut self, multiplicity: usize) -> Self {
        self.multiplicity = multiplicity;
        if let Some(first) = self.cnn.layers.first_mut() {
            first.in_channels = embedding_channels(self.dim_y, multiplicity);
        }
        self
    }

    /// Replace the CNN with a plain chain of convolutions with the given
    /// hidden widths. The margin is reset to the new receptive field.
    pub fn with_hidden_widths(mut self, hidden: &[usize]) -> Self {
        let mut widths = vec![embedding_channels(self.dim_y, self.multiplicity)];
        widths.extend_from_slice(hidden);
        widths.push(2 * self.dim_y);
        let last = widths.len() - 2;
        self.cnn.layers = (0..=last)
            .map(|i| LayerSpec {
                in_channels: widths[i],
                out_channels: widths[i + 1],
                inputs: vec![i],
                relu: i < last,
            })
            .collect();
        self.margin = self.cnn.receptive_half_width() as f64 / self.density;
        self
    }

    pub fn grid_for(&self, task: &Task) -> Result<UniformGrid, ModelError> {
        Ok(make_grid(&task.context_xs(), &task.target_xs(), self.density, self.margin)?)
    }
}

impl Model for ConvCnp {
    fn name(&self) -> String {
        match self.cnn.variant {
            CnnVariant::Small => "convcnp".into(),
            CnnVariant::Xl => "convcnp_xl".into(),
        }
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore, ModelError> {
        let mut store = ParameterStore::new();
        let log_ls = LearnableEq::initial_length_scale(self.density).ln();
        store.insert(ENCODER_SCALE, Array::scalar(log_ls))?;
        store.insert(DECODER_SCALE, Array::scalar(log_ls))?;
        self.cnn.init_params(CNN_PREFIX, &mut store, &mut rng(seed))?;
        Ok(store)
    }

    fn forward(&self, g: &mut Graph, params: &ParameterStore, task: &Task) -> Result<PredictionNodes, ModelError> {
        check_task(task, self.dim_y)?;
        let m = task.target.len();
        let grid = self.grid_for(task)?;

        let psi = LearnableEq::new(ENCODER_SCALE);
        let enc_ls = g.param(params, ENCODER_SCALE)?;
        let h = embed_node(g, &task.context, &grid, &psi, enc_ls, self.dim_y, self.multiplicity)?;
        let h = normalize_density_node(g, h, self.eps)?;
        let f = self.cnn.forward(g, params, CNN_PREFIX, h)?;

        // Readout weights psi_rho(x*_m - t_i), laid out (T, M).
        let ts = grid.points();
        let xs = task.target_xs();
        let mut sq = Vec::with_capacity(ts.len() * m);
        for t in &ts {
            sq.extend(xs.iter().map(|x| (x - t) * (x - t)));
        }
        let psi_rho = LearnableEq::new(DECODER_SCALE);
        let dec_ls = g.param(params, DECODER_SCALE)?;
        let basis = psi_rho.eval_sq(g, dec_ls, &Array::matrix(ts.len(), m, sq)?)?;

        let f_mu = g.slice(f, 0, self.dim_y)?;
        let f_sigma = g.slice(f, self.dim_y, self.dim_y)?;
        let mean = g.matmul(f_mu, basis)?;
        let pos = g.softplus(f_sigma)?;
        let std = g.matmul(pos, basis)?;
        let std = if self.sigma_floor { apply_sigma_floor(g, std)? } else { std };
        Ok(PredictionNodes { mean, std })
    }
}
