//! Set embeddings into function space.
//!
//! A context set `{(x_n, y_n)}` is mapped to `E(t) = sum_n phi(y_n) psi(t - x_n)`
//! evaluated on a uniform grid, where `phi(y) = (1, y, ..., y^K)` per output
//! dimension. Channel 0 is the density channel. The signal channels are then
//! divided by `density + eps` (normalised convolution).
//!
//! Contributions are accumulated in sorted `(x, y)` order, so reordering the
//! context set leaves the embedding bit-for-bit unchanged.

use std::cmp::Ordering;

use crate::diff::{Array, DiffError, Graph, NodeId};
use crate::kernels::LearnableEq;
use crate::synth::Observation;

/// Default denominator guard for the normalised convolution.
pub const DENSITY_EPS: f64 = 1e-8;

/// Evenly spaced points `t_i = (first_index + i) / density`, `i < len`.
///
/// Grid points sit on integer multiples of the spacing in a fixed global
/// frame, so translating the data by a multiple of the spacing translates the
/// grid by exactly the same amount.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformGrid {
    pub density: f64,
    pub margin: f64,
    pub first_index: i64,
    pub len: usize,
}

impl UniformGrid {
    pub fn spacing(&self) -> f64 {
        1.0 / self.density
    }

    pub fn point(&self, i: usize) -> f64 {
        (self.first_index + i as i64) as f64 / self.density
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.point(i)).collect()
    }

    pub fn lower(&self) -> f64 {
        self.point(0)
    }

    pub fn upper(&self) -> f64 {
        self.point(self.len - 1)
    }
}

/// Grid over `[min - margin, max + margin]` of all context and target inputs,
/// with edges snapped outward to multiples of `1 / density`. For aligned
/// ranges this gives `span * density + 1` points.
pub fn make_grid(
    context_xs: &[f64],
    target_xs: &[f64],
    density: f64,
    margin: f64,
) -> Result<UniformGrid, DiffError> {
    if !(density > 0.0) || !(margin >= 0.0) {
        return Err(DiffError::InvalidArgument(format!(
            "make_grid: need density > 0 and margin >= 0, got {density} and {margin}"
        )));
    }
    let mut all = context_xs.iter().chain(target_xs).copied().peekable();
    if all.peek().is_none() {
        return Err(DiffError::InvalidArgument("make_grid: no input points".into()));
    }
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(DiffError::InvalidArgument("make_grid: non-finite input".into()));
    }
    let first = ((lo - margin) * density).floor() as i64;
    let mut last = ((hi + margin) * density).ceil() as i64;
    if last == first {
        last += 1;
    }
    Ok(UniformGrid {
        density,
        margin,
        first_index: first,
        len: (last - first + 1) as usize,
    })
}

/// `(1, y_1, ..., y_1^K, y_2, ..., y_2^K, ...)`: a shared constant followed by
/// the powers of every output dimension.
pub fn phi_power_series(y: &[f64], multiplicity: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + multiplicity * y.len());
    out.push(1.0);
    for &v in y {
        let mut p = 1.0;
        for _ in 0..multiplicity {
            p *= v;
            out.push(p);
        }
    }
    out
}

pub fn embedding_channels(dim_y: usize, multiplicity: usize) -> usize {
    1 + multiplicity * dim_y
}

fn sorted_context(context: &[Observation]) -> Vec<&Observation> {
    let mut sorted: Vec<&Observation> = context.iter().collect();
    sorted.sort_by(|a, b| {
        a.x.total_cmp(&b.x).then_with(|| {
            a.y.iter()
                .zip(&b.y)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    sorted
}

/// Embedding `(channels, grid.len)` as a graph node, differentiable in the
/// log length scale of `psi`.
pub fn embed_node(
    g: &mut Graph,
    context: &[Observation],
    grid: &UniformGrid,
    psi: &LearnableEq,
    log_ls: NodeId,
    dim_y: usize,
    multiplicity: usize,
) -> Result<NodeId, DiffError> {
    let channels = embedding_channels(dim_y, multiplicity);
    let sorted = sorted_context(context);
    let n = sorted.len();
    let mut phi_t = vec![0.0; channels * n];
    for (j, o) in sorted.iter().enumerate() {
        if o.y.len() != dim_y {
            return Err(DiffError::InvalidArgument(format!(
                "embed: observation has {} outputs, expected {dim_y}",
                o.y.len()
            )));
        }
        for (c, v) in phi_power_series(&o.y, multiplicity).into_iter().enumerate() {
            phi_t[c * n + j] = v;
        }
    }
    let ts = grid.points();
    let mut sq = Vec::with_capacity(n * ts.len());
    for o in &sorted {
        sq.extend(ts.iter().map(|t| (t - o.x) * (t - o.x)));
    }
    let phi_t = g.constant(Array::matrix(channels, n, phi_t)?);
    let weights = psi.eval_sq(g, log_ls, &Array::matrix(n, ts.len(), sq)?)?;
    g.matmul(phi_t, weights)
}

/// Divide every channel but the first by `density + eps`.
pub fn normalize_density_node(g: &mut Graph, h: NodeId, eps: f64) -> Result<NodeId, DiffError> {
    let channels = g.value(h).shape()[0];
    if channels < 2 {
        return Ok(h);
    }
    let density = g.slice(h, 0, 1)?;
    let signal = g.slice(h, 1, channels - 1)?;
    let denom = g.add_scalar(density, eps)?;
    let denom = g.repeat(denom, channels - 1)?;
    let normalized = g.div(signal, denom)?;
    g.concat(&[density, normalized], 0)
}

/// A functional embedding evaluated on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalEmbedding {
    pub grid: UniformGrid,
    /// Shape `(channels, grid.len)`; channel 0 is the density.
    pub channels: Array,
}

impl FunctionalEmbedding {
    pub fn density(&self) -> &[f64] {
        &self.channels.data()[..self.grid.len]
    }

    /// Values of channel `c` along the grid.
    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.grid.len;
        &self.channels.data()[c * t..(c + 1) * t]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    /// CSV with columns `t,h0,h1,...`.
    pub fn to_csv(&self) -> String {
        let c = self.num_channels();
        let mut out = String::from("t");
        for i in 0..c {
            out.push_str(&format!(",h{i}"));
        }
        out.push('\n');
        for i in 0..self.grid.len {
            out.push_str(&self.grid.point(i).to_string());
            for ch in 0..c {
                out.push(',');
                out.push_str(&self.channel(ch)[i].to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Embed `context` with a fixed-length-scale EQ `psi`.
pub fn embed(
    context: &[Observation],
    grid: &UniformGrid,
    length_scale: f64,
    dim_y: usize,
    multiplicity: usize,
) -> Result<FunctionalEmbedding, DiffError> {
    let mut g = Graph::new();
    let log_ls = g.constant(Array::scalar(length_scale.ln()));
    let h = embed_node(&mut g, context, grid, &LearnableEq::new("psi"), log_ls, dim_y, multiplicity)?;
    Ok(FunctionalEmbedding {
        grid: grid.clone(),
        channels: g.value(h).clone(),
    })
}

/// Normalised convolution of an existing embedding.
pub fn normalize_density(e: &FunctionalEmbedding, eps: f64) -> Result<FunctionalEmbedding, DiffError> {
    if !(eps > 0.0) {
        return Err(DiffError::InvalidArgument(format!("normalize_density: eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let h = g.constant(e.channels.clone());
    let out = normalize_density_node(&mut g, h, eps)?;
    Ok(FunctionalEmbedding {
        grid: e.grid.clone(),
        channels: g.value(out).clone(),
    })
}
