//! Convolutional backbones shared by the off-grid and on-grid models.

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::diff::{Array, DiffError, Graph, NodeId, Padding, ParameterStore};
use crate::rng::Rng as SeededRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnnVariant {
    /// Four layers with `[16, 32, 16, out]` channels.
    #[default]
    Small,
    /// Twelve layers, UNet-style: channels double for six layers, then halve,
    /// with concatenation skips into layers 8 to 12.
    Xl,
}

/// One convolution layer. `inputs` index earlier activations: 0 is the CNN
/// input, `i` is the output of layer `i`. Several inputs are concatenated
/// along the channel axis in the listed order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub inputs: Vec<usize>,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnSpec {
    pub variant: CnnVariant,
    pub spatial_dims: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    pub depthwise_separable: bool,
    pub layers: Vec<LayerSpec>,
}

const XL_BASE_CHANNELS: usize = 8;

impl CnnSpec {
    /// Build a backbone. When `relu_last` is false the final layer is linear,
    /// which is what the off-grid models want for their mean/scale channels.
    pub fn new(
        variant: CnnVariant,
        spatial_dims: usize,
        in_channels: usize,
        out_channels: usize,
        relu_last: bool,
    ) -> Self {
        let layers = match variant {
            CnnVariant::Small => {
                let widths = [in_channels, 16, 32, 16, out_channels];
                (0..4)
                    .map(|i| LayerSpec {
                        in_channels: widths[i],
                        out_channels: widths[i + 1],
                        inputs: vec![i],
                        relu: i < 3 || relu_last,
                    })
                    .collect()
            }
            CnnVariant::Xl => {
                // Output widths of layers 1..=12.
                let mut out = [0usize; 13];
                for i in 1..=6 {
                    out[i] = XL_BASE_CHANNELS << (i - 1);
                }
                for i in 7..=11 {
                    out[i] = out[i - 1] / 2;
                }
                out[12] = out_channels;
                (1..=12)
                    .map(|i| {
                        let inputs = if i >= 8 { vec![13 - i, i - 1] } else { vec![i - 1] };
                        let in_ch = inputs
                            .iter()
                            .map(|&j| if j == 0 { in_channels } else { out[j] })
                            .sum();
                        LayerSpec {
                            in_channels: in_ch,
                            out_channels: out[i],
                            inputs,
                            relu: i < 12 || relu_last,
                        }
                    })
                    .collect()
            }
        };
        Self {
            variant,
            spatial_dims,
            kernel_size: 5,
            padding: Padding::Zero,
            depthwise_separable: false,
            layers,
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_depthwise_separable(mut self, on: bool) -> Self {
        self.depthwise_separable = on;
        self
    }

    pub fn with_kernel_size(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Receptive-field half width in grid points.
    pub fn receptive_half_width(&self) -> usize {
        self.layers.len() * (self.kernel_size - 1) / 2
    }

    fn kernel_shape(&self, out: usize, inp: usize) -> Vec<usize> {
        let mut s = vec![out, inp];
        s.extend(std::iter::repeat_n(self.kernel_size, self.spatial_dims));
        s
    }

    /// Add layer weights under `prefix` with PyTorch-style uniform
    /// `+-1/sqrt(fan_in)` initialisation.
    pub fn init_params(&self, prefix: &str, store: &mut ParameterStore, rng: &mut SeededRng) -> Result<(), DiffError> {
        let taps = self.kernel_size.pow(self.spatial_dims as u32);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
            let n = shape.iter().product();
            Array::new(shape, (0..n).map(|_| rng.sample(dist)).collect()).expect("shape")
        };
        for (i, l) in self.layers.iter().enumerate() {
            let name = format!("{prefix}.{}", i + 1);
            if self.depthwise_separable {
                store.insert(format!("{name}.depthwise"), uniform(self.kernel_shape(l.in_channels, 1), taps))?;
                let mut pw = vec![l.out_channels, l.in_channels];
                pw.extend(std::iter::repeat_n(1, self.spatial_dims));
                store.insert(format!("{name}.pointwise"), uniform(pw, l.in_channels))?;
                store.insert(format!("{name}.bias"), uniform(vec![l.out_channels], l.in_channels))?;
            } else {
                let fan_in = l.in_channels * taps;
                store.insert(format!("{name}.weight"), uniform(self.kernel_shape(l.out_channels, l.in_channels), fan_in))?;
                store.insert(format!("{name}.bias"), uniform(vec![l.out_channels], fan_in))?;
            }
        }
        Ok(())
    }

    fn conv(
        &self,
        g: &mut Graph,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        groups: usize,
    ) -> Result<NodeId, DiffError> {
        match self.spatial_dims {
            1 => g.conv1d(x, w, b, self.padding, groups),
            2 => g.conv2d(x, w, b, self.padding, groups),
            d => Err(DiffError::InvalidArgument(format!("unsupported spatial dimension {d}"))),
        }
    }

    /// Run the stack on a channels-first feature map.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, prefix: &str, input: NodeId) -> Result<NodeId, DiffError> {
        let mut acts = vec![input];
        for (i, l) in self.layers.iter().enumerate() {
            let name = format!("{prefix}.{}", i + 1);
            let srcs: Vec<NodeId> = l.inputs.iter().map(|&j| acts[j]).collect();
            let x = if srcs.len() == 1 { srcs[0] } else { g.concat(&srcs, 0)? };
            let b = g.param(store, &format!("{name}.bias"))?;
            let y = if self.depthwise_separable {
                let dw = g.param(store, &format!("{name}.depthwise"))?;
                let pw = g.param(store, &format!("{name}.pointwise"))?;
                let h = self.conv(g, x, dw, None, l.in_channels)?;
                self.conv(g, h, pw, Some(b), 1)?
            } else {
                let w = g.param(store, &format!("{name}.weight"))?;
                self.conv(g, x, w, Some(b), 1)?
            };
            let y = if l.relu { g.relu(y)? } else { y };
            acts.push(y);
        }
        Ok(*acts.last().expect("at least one layer"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn small_layout() {
        let spec = CnnSpec::new(CnnVariant::Small, 1, 2, 2, false);
        let widths: Vec<(usize, usize)> = spec.layers.iter().map(|l| (l.in_channels, l.out_channels)).collect();
        assert_eq!(widths, vec![(2, 16), (16, 32), (32, 16), (16, 2)]);
        assert!(!spec.layers[3].relu);
        assert_eq!(spec.receptive_half_width(), 8);
    }

    #[test]
    fn xl_skips() {
        let spec = CnnSpec::new(CnnVariant::Xl, 1, 2, 2, false);
        assert_eq!(spec.layers.len(), 12);
        let skips: Vec<Vec<usize>> = spec.layers[7..].iter().map(|l| l.inputs.clone()).collect();
        assert_eq!(skips, vec![vec![5, 7], vec![4, 8], vec![3, 9], vec![2, 10], vec![1, 11]]);
        let outs: Vec<usize> = spec.layers.iter().map(|l| l.out_channels).collect();
        assert_eq!(outs, vec![8, 16, 32, 64, 128, 256, 128, 64, 32, 16, 8, 2]);
        assert_eq!(spec.layers[7].in_channels, 128 + 128);
        assert_eq!(spec.layers[11].in_channels, 8 + 8);
    }

    #[test]
    fn forward_preserves_extent() {
        for variant in [CnnVariant::Small, CnnVariant::Xl] {
            for separable in [false, true] {
                let spec = CnnSpec::new(variant, 1, 3, 4, false).with_depthwise_separable(separable);
                let mut store = ParameterStore::new();
                spec.init_params("cnn", &mut store, &mut rng(1)).unwrap();
                let mut g = Graph::new();
                let x = g.constant(Array::ones(&[3, 21]));
                let y = spec.forward(&mut g, &store, "cnn", x).unwrap();
                assert_eq!(g.value(y).shape(), &[4, 21]);
            }
        }
    }

    #[test]
    fn two_dimensional_forward() {
        let spec = CnnSpec::new(CnnVariant::Small, 2, 2, 3, true).with_kernel_size(3);
        let mut store = ParameterStore::new();
        spec.init_params("cnn", &mut store, &mut rng(2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Array::ones(&[2, 6, 5]));
        let y = spec.forward(&mut g, &store, "cnn", x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 6, 5]);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }
}
