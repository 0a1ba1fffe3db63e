//! On-grid ConvCNP. Data live on a regular 1-D or 2-D grid and context and
//! target sets are given as binary masks over that grid.

use rand::Rng;
use rand_distr::Uniform;

use crate::diff::{Array, DiffError, Graph, NodeId, Padding, ParameterStore};
use crate::rng::rng;

use super::{apply_sigma_floor, check_task, CnnSpec, CnnVariant, Model, ModelError, PredictionNodes, PredictiveDistribution};
use crate::synth::Task;

const ENCODER_WEIGHT: &str = "encoder.weight";
const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";
const CNN_PREFIX: &str = "cnn";

#[derive(Clone, Debug)]
pub struct OnGridConvCnp {
    /// Number of data channels `C`.
    pub channels: usize,
    pub spatial_dims: usize,
    /// Width of the positive first-layer filter.
    pub encoder_kernel: usize,
    pub cnn: CnnSpec,
    pub eps: f64,
    pub sigma_floor: bool,
    /// Lattice points per unit input, used when the model is applied to
    /// 1-D tasks whose inputs sit on the lattice `j / density`.
    pub density: f64,
}

impl OnGridConvCnp {
    pub fn new(channels: usize, spatial_dims: usize) -> Self {
        let hidden = 16;
        let cnn = CnnSpec::new(CnnVariant::Small, spatial_dims, channels + 1, hidden, true).with_depthwise_separable(true);
        Self {
            channels,
            spatial_dims,
            encoder_kernel: 5,
            cnn,
            eps: crate::convdeepset::DENSITY_EPS,
            sigma_floor: true,
            density: 32.0,
        }
    }

    pub fn with_density(mut self, density: f64) -> Self {
        self.density = density;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.cnn = self.cnn.with_padding(padding);
        self
    }

    pub fn with_cnn(mut self, cnn: CnnSpec) -> Self {
        self.cnn = cnn;
        self
    }

    pub fn with_sigma_floor(mut self, on: bool) -> Self {
        self.sigma_floor = on;
        self
    }

    fn hidden(&self) -> usize {
        self.cnn.out_channels()
    }

    fn conv(&self, g: &mut Graph, x: NodeId, w: NodeId, b: Option<NodeId>, padding: Padding, groups: usize) -> Result<NodeId, DiffError> {
        if self.spatial_dims == 1 {
            g.conv1d(x, w, b, padding, groups)
        } else {
            g.conv2d(x, w, b, padding, groups)
        }
    }

    fn check_inputs<const N: usize>(&self, image: &Array, masks: [&Array; N]) -> Result<(), ModelError> {
        if !(1..=2).contains(&self.spatial_dims) {
            return Err(ModelError::InvalidInput(format!("unsupported spatial dimension {}", self.spatial_dims)));
        }
        let shape = image.shape();
        if shape.len() != 1 + self.spatial_dims || shape[0] != self.channels {
            return Err(ModelError::InvalidInput(format!(
                "image shape {shape:?} does not match {} channels over {} spatial dims",
                self.channels, self.spatial_dims
            )));
        }
        for m in masks {
            if m.shape() != &shape[1..] {
                return Err(ModelError::InvalidInput(format!(
                    "mask shape {:?} does not match image grid {:?}",
                    m.shape(),
                    &shape[1..]
                )));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(ModelError::InvalidInput("mask entries must be 0 or 1".into()));
            }
        }
        Ok(())
    }

    /// Channel-stacked copy of a spatial mask: `(C, spatial...)`.
    fn tile(&self, mask: &Array) -> Array {
        let mut shape = vec![self.channels];
        shape.extend_from_slice(mask.shape());
        let data = mask.data().repeat(self.channels);
        Array::new(shape, data).expect("tiled mask")
    }

    /// First layer: `[density, normalized signal]` with shape `(C + 1, spatial...)`.
    pub fn encode(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        image: &Array,
        context_mask: &Array,
    ) -> Result<NodeId, ModelError> {
        self.check_inputs(image, [context_mask])?;
        let c = self.channels;
        let mut mshape = vec![1];
        mshape.extend_from_slice(context_mask.shape());
        let mc = g.constant(context_mask.clone().reshape(mshape)?);
        let signal = image.zip_map(&self.tile(context_mask), |v, m| v * m);
        let signal = g.constant(signal);

        let w = g.param(params, ENCODER_WEIGHT)?;
        let w = g.abs(w)?;
        let pad = self.cnn.padding;
        let density = self.conv(g, mc, w, None, pad, 1)?;
        let ws = vec![w; c];
        let w_c = g.concat(&ws, 0)?;
        let conv_signal = self.conv(g, signal, w_c, None, pad, c)?;
        let denom = g.add_scalar(density, self.eps)?;
        let denom = g.repeat(denom, c)?;
        let normalized = g.div(conv_signal, denom)?;
        Ok(g.concat(&[density, normalized], 0)?)
    }

    /// Builds the forward graph. `image` is channels-first, `(C, N)` or
    /// `(C, H, W)`; masks have the spatial shape. The returned mean and scale
    /// maps cover the full grid with shape `(C, spatial...)`.
    pub fn forward_grid(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        image: &Array,
        context_mask: &Array,
        target_mask: &Array,
    ) -> Result<PredictionNodes, ModelError> {
        self.check_inputs(image, [context_mask, target_mask])?;
        let c = self.channels;
        let h = self.encode(g, params, image, context_mask)?;
        let f = self.cnn.forward(g, params, CNN_PREFIX, h)?;
        let hw = g.param(params, HEAD_WEIGHT)?;
        let hb = g.param(params, HEAD_BIAS)?;
        let out = self.conv(g, f, hw, Some(hb), Padding::Zero, 1)?;

        let mean = g.slice(out, 0, c)?;
        let pre = g.slice(out, c, c)?;
        let std = g.softplus(pre)?;
        let std = if self.sigma_floor { apply_sigma_floor(g, std)? } else { std };
        Ok(PredictionNodes { mean, std })
    }

    pub fn predict_grid(
        &self,
        params: &ParameterStore,
        image: &Array,
        context_mask: &Array,
        target_mask: &Array,
    ) -> Result<OnGridPrediction, ModelError> {
        let mut g = Graph::new();
        let nodes = self.forward_grid(&mut g, params, image, context_mask, target_mask)?;
        Ok(OnGridPrediction {
            mean: g.value(nodes.mean).clone(),
            std: g.value(nodes.std).clone(),
            target_mask: target_mask.clone(),
        })
    }

    /// Negative mean log density over target pixels and channels.
    pub fn nll_loss_grid(
        &self,
        g: &mut Graph,
        pred: &PredictionNodes,
        image: &Array,
        target_mask: &Array,
    ) -> Result<NodeId, ModelError> {
        let n_target = target_mask.data().iter().filter(|&&v| v == 1.0).count();
        if n_target == 0 {
            return Err(ModelError::InvalidInput("target mask is empty".into()));
        }
        let y = g.constant(image.clone());
        let lp = g.gaussian_log_pdf(y, pred.mean, pred.std)?;
        let mt = g.constant(self.tile(target_mask));
        let masked = g.mul(lp, mt)?;
        let total = g.sum(masked)?;
        Ok(g.scale(total, -1.0 / (n_target * self.channels) as f64)?)
    }
}

impl OnGridConvCnp {
    /// Grid extension on each side of the data, in lattice points.
    fn margin_points(&self) -> i64 {
        (self.cnn.receptive_half_width() + self.encoder_kernel / 2) as i64
    }

    fn lattice_index(&self, x: f64) -> Result<i64, ModelError> {
        let j = x * self.density;
        let r = j.round();
        if (j - r).abs() > 1e-6 {
            return Err(ModelError::InvalidTask(format!(
                "input {x} is not on the lattice of density {}",
                self.density
            )));
        }
        Ok(r as i64)
    }
}

impl Model for OnGridConvCnp {
    fn name(&self) -> String {
        "convcnp_ongrid".into()
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore, ModelError> {
        let mut r = rng(seed);
        let mut store = ParameterStore::new();
        let taps = self.encoder_kernel.pow(self.spatial_dims as u32);
        // Kept away from zero so |w| stays differentiable at initialisation.
        let dist = Uniform::new(0.1, 1.0).expect("valid range");
        let mut shape = vec![1, 1];
        shape.extend(std::iter::repeat_n(self.encoder_kernel, self.spatial_dims));
        store.insert(ENCODER_WEIGHT, Array::new(shape, (0..taps).map(|_| r.sample(dist)).collect())?)?;
        self.cnn.init_params(CNN_PREFIX, &mut store, &mut r)?;
        let h = self.hidden();
        let b = 1.0 / (h as f64).sqrt();
        let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
        let mut shape = vec![2 * self.channels, h];
        shape.extend(std::iter::repeat_n(1, self.spatial_dims));
        let w = (0..2 * self.channels * h).map(|_| r.sample(dist)).collect();
        store.insert(HEAD_WEIGHT, Array::new(shape, w)?)?;
        store.insert(HEAD_BIAS, Array::vector((0..2 * self.channels).map(|_| r.sample(dist)).collect()))?;
        Ok(store)
    }

    /// Lays the task out on the lattice: context values and mask on the
    /// covered pixels, then reads predictions back in target order.
    fn forward(&self, g: &mut Graph, params: &ParameterStore, task: &Task) -> Result<PredictionNodes, ModelError> {
        check_task(task, self.channels)?;
        if self.spatial_dims != 1 {
            return Err(ModelError::InvalidInput("tasks can only be laid out on a 1-D grid".into()));
        }
        let ctx: Vec<i64> = task.context.iter().map(|o| self.lattice_index(o.x)).collect::<Result<_, _>>()?;
        let tgt: Vec<i64> = task.target.iter().map(|o| self.lattice_index(o.x)).collect::<Result<_, _>>()?;
        let all = ctx.iter().chain(&tgt);
        let lo = all.clone().min().copied().unwrap_or(0) - self.margin_points();
        let hi = all.max().copied().unwrap_or(0) + self.margin_points();
        let len = (hi - lo + 1) as usize;
        let c = self.channels;
        let mut image = Array::zeros(&[c, len]);
        let mut mc = Array::zeros(&[len]);
        let mut mt = Array::zeros(&[len]);
        for (o, &j) in task.context.iter().zip(&ctx) {
            let p = (j - lo) as usize;
            if mc.data()[p] == 1.0 {
                return Err(ModelError::InvalidTask(format!("two context points share lattice point {j}")));
            }
            mc.data_mut()[p] = 1.0;
            for (d, &y) in o.y.iter().enumerate() {
                image.data_mut()[d * len + p] = y;
            }
        }
        for &j in &tgt {
            mt.data_mut()[(j - lo) as usize] = 1.0;
        }
        let full = self.forward_grid(g, params, &image, &mc, &mt)?;
        // One-hot selection (len, M) picks each target's pixel exactly.
        let m = tgt.len();
        let mut sel = Array::zeros(&[len, m]);
        for (k, &j) in tgt.iter().enumerate() {
            sel.data_mut()[(j - lo) as usize * m + k] = 1.0;
        }
        let sel = g.constant(sel);
        let mean = g.matmul(full.mean, sel)?;
        let std = g.matmul(full.std, sel)?;
        Ok(PredictionNodes { mean, std })
    }
}

/// Full-grid predictions together with the mask selecting target pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct OnGridPrediction {
    pub mean: Array,
    pub std: Array,
    pub target_mask: Array,
}

impl OnGridPrediction {
    /// Predictions at target pixels only, dimension-major over channels.
    pub fn targets(&self) -> PredictiveDistribution {
        let c = self.mean.shape()[0];
        let idx: Vec<usize> = self
            .target_mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        let n = self.target_mask.len();
        let pick = |a: &Array| -> Vec<f64> { (0..c).flat_map(|ch| idx.iter().map(move |&i| a.data()[ch * n + i])).collect() };
        PredictiveDistribution {
            dim_y: c,
            n_targets: idx.len(),
            mean: pick(&self.mean),
            std: pick(&self.std),
        }
    }
}
