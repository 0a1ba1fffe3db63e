//! Computation graph with reverse accumulation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the reverse pass is a single backwards sweep.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::{Array, DiffError, ParameterStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boundary handling for convolutions. Padding width is always
/// `(kernel_size - 1) / 2`, so spatial extents are preserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv1d(ConvArgs),
    Conv2d(ConvArgs),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Powi(NodeId, i32),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, start: usize, len: usize },
    BroadcastScalar(NodeId),
    Repeat(NodeId),
    MeanRows(NodeId),
    Transpose(NodeId),
    AddBias { input: NodeId, bias: NodeId },
    GaussianLogPdf { y: NodeId, mu: NodeId, sigma: NodeId },
}

#[derive(Clone, Copy, Debug)]
struct ConvArgs {
    input: NodeId,
    kernel: NodeId,
    bias: Option<NodeId>,
    padding: Padding,
    groups: usize,
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// A single-threaded tape of array operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(NodeId, String)>,
    param_index: HashMap<String, NodeId>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `node`; `None` when the node does not influence the loss.
    pub fn get(&self, node: NodeId) -> Option<&Array> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, lhs: &Array, rhs: &Array) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Array {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Array, op: Op, name: &'static str) -> Result<NodeId, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that receives no parameter gradient.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf bound to a named entry of `store`. Requesting the same name
    /// twice returns the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId, DiffError> {
        if let Some(&id) = self.param_index.get(name) {
            return Ok(id);
        }
        let value = store
            .value(name)
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))?
            .clone();
        let id = self.constant(value);
        self.params.push((id, name.to_string()));
        self.param_index.insert(name.to_string(), id);
        Ok(id)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let out = va.zip_map(vb, f);
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division. No guard is added to the denominator.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `(m, k) x (k, n) -> (m, n)`. Inner extent may be zero.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = match (va.shape(), vb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(mismatch("matmul", va, vb)),
        };
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let out = Array::matrix(m, n, out)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Cross-correlation over `(C_in, L)` with kernel `(C_out, C_in / groups, k)`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
        groups: usize,
    ) -> Result<NodeId, DiffError> {
        let args = ConvArgs {
            input,
            kernel,
            bias,
            padding,
            groups,
        };
        let geom = self.conv_geometry(&args, 1)?;
        let out = conv_forward(&geom, self.value(input), self.value(kernel), bias.map(|b| self.value(b)));
        self.push(out, Op::Conv1d(args), "conv1d")
    }

    /// Cross-correlation over `(C_in, H, W)` with kernel `(C_out, C_in / groups, kh, kw)`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
        groups: usize,
    ) -> Result<NodeId, DiffError> {
        let args = ConvArgs {
            input,
            kernel,
            bias,
            padding,
            groups,
        };
        let geom = self.conv_geometry(&args, 2)?;
        let out = conv_forward(&geom, self.value(input), self.value(kernel), bias.map(|b| self.value(b)));
        self.push(out, Op::Conv2d(args), "conv2d")
    }

    fn conv_geometry(&self, args: &ConvArgs, dims: usize) -> Result<ConvGeometry, DiffError> {
        let name = if dims == 1 { "conv1d" } else { "conv2d" };
        let x = self.value(args.input);
        let w = self.value(args.kernel);
        if x.ndim() != dims + 1 || w.ndim() != dims + 2 {
            return Err(mismatch(name, x, w));
        }
        let c_in = x.shape()[0];
        let c_out = w.shape()[0];
        let groups = args.groups;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || w.shape()[1] * groups != c_in {
            return Err(mismatch(name, x, w));
        }
        let (h, wd, kh, kw) = if dims == 1 {
            (1, x.shape()[1], 1, w.shape()[2])
        } else {
            (x.shape()[1], x.shape()[2], w.shape()[2], w.shape()[3])
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(DiffError::InvalidArgument(format!(
                "{name}: kernel extents must be odd, got {:?}",
                &w.shape()[2..]
            )));
        }
        if let Some(b) = args.bias {
            let vb = self.value(b);
            if vb.shape() != [c_out] {
                return Err(mismatch(name, w, vb));
            }
        }
        Ok(ConvGeometry {
            c_in,
            c_out,
            groups,
            h,
            w: wd,
            kh,
            kw,
            padding: args.padding,
        })
    }

    fn unary(
        &mut self,
        a: NodeId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId, DiffError> {
        let out = self.value(a).map(f);
        self.push(out, op, name)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, "softplus", softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(DiffError::InvalidArgument(
                "log: input must be strictly positive".into(),
            ));
        }
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.unary(a, "abs", f64::abs, Op::Abs(a))
    }

    /// Integer power `x^n`.
    pub fn powi(&mut self, a: NodeId, n: i32) -> Result<NodeId, DiffError> {
        self.unary(a, "power", |x| x.powi(n), Op::Powi(a, n))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.unary(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    /// Add a fixed constant.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let s = self.value(a).sum();
        self.push(Array::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(DiffError::InvalidArgument("mean: empty input".into()));
        }
        let m = v.sum() / v.len() as f64;
        self.push(Array::scalar(m), Op::Mean(a), "mean")
    }

    /// Concatenate along `axis`; all other extents must agree. Axis 0 is the
    /// channel axis for `(C, ...)` feature maps.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        let first = *inputs
            .first()
            .ok_or_else(|| DiffError::InvalidArgument("concat: no inputs".into()))?;
        let base = self.value(first);
        if axis >= base.ndim() {
            return Err(DiffError::InvalidArgument(format!(
                "concat: axis {axis} out of range for shape {:?}",
                base.shape()
            )));
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = 0;
        for &id in inputs {
            let v = self.value(id);
            let ok = v.ndim() == base.ndim()
                && v.shape()
                    .iter()
                    .zip(base.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", base, v));
            }
            shape[axis] += v.shape()[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = self.value(id);
                let chunk: usize = v.shape()[axis..].iter().product();
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Array::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let v = self.value(input);
        let Some(&rows) = v.shape().first() else {
            return Err(DiffError::InvalidArgument("slice: scalar input".into()));
        };
        if start + len > rows {
            return Err(DiffError::InvalidArgument(format!(
                "slice: rows {start}..{} out of range for shape {:?}",
                start + len,
                v.shape()
            )));
        }
        let row: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * row..(start + len) * row].to_vec();
        let out = Array::new(shape, data)?;
        self.push(out, Op::Slice { input, start, len }, "slice")
    }

    /// Fill an array of `shape` with a single-element input.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let s = v.item().ok_or_else(|| {
            DiffError::InvalidArgument(format!("broadcast_scalar: input shape {:?} is not scalar", v.shape()))
        })?;
        self.push(Array::full(shape, s), Op::BroadcastScalar(a), "broadcast_scalar")
    }

    /// Tile an input of shape `(1, ...)` into `(n, ...)`.
    pub fn repeat(&mut self, a: NodeId, n: usize) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        if v.shape().first() != Some(&1) {
            return Err(DiffError::InvalidArgument(format!(
                "repeat: leading extent must be 1, got {:?}",
                v.shape()
            )));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let data = v.data().repeat(n);
        let out = Array::new(shape, data)?;
        self.push(out, Op::Repeat(a), "repeat")
    }

    /// Mean over the rows of an `(n, d)` matrix, giving `(1, d)`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let [n, d] = *v.shape() else {
            return Err(DiffError::InvalidArgument(format!(
                "mean_rows: expected a matrix, got {:?}",
                v.shape()
            )));
        };
        if n == 0 {
            return Err(DiffError::InvalidArgument("mean_rows: no rows".into()));
        }
        let mut out = vec![0.0; d];
        for row in v.data().chunks_exact(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Array::matrix(1, d, out)?, Op::MeanRows(a), "mean_rows")
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let [r, c] = *v.shape() else {
            return Err(DiffError::InvalidArgument(format!(
                "transpose: expected a matrix, got {:?}",
                v.shape()
            )));
        };
        let out = Array::matrix(c, r, transpose(v.data(), r, c))?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Add a bias vector along the last axis.
    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let (v, b) = (self.value(input), self.value(bias));
        let (_, cols) = v.rows_cols();
        if b.shape() != [cols] || v.ndim() == 0 {
            return Err(mismatch("add_bias", v, b));
        }
        let mut out = v.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_exact_mut(cols) {
                for (o, x) in row.iter_mut().zip(b.data()) {
                    *o += x;
                }
            }
        }
        self.push(out, Op::AddBias { input, bias }, "add_bias")
    }

    /// Elementwise Gaussian log density `log N(y; mu, sigma^2)`.
    pub fn gaussian_log_pdf(&mut self, y: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId, DiffError> {
        let (vy, vm, vs) = (self.value(y), self.value(mu), self.value(sigma));
        if vy.shape() != vm.shape() {
            return Err(mismatch("gaussian_log_pdf", vy, vm));
        }
        if vy.shape() != vs.shape() {
            return Err(mismatch("gaussian_log_pdf", vy, vs));
        }
        if let Some(&bad) = vs.data().iter().find(|&&s| s <= 0.0 || s.is_nan()) {
            return Err(DiffError::NonPositiveSigma(bad));
        }
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let data = vy
            .data()
            .iter()
            .zip(vm.data())
            .zip(vs.data())
            .map(|((&y, &m), &s)| {
                let z = (y - m) / s;
                -half_log_2pi - s.ln() - 0.5 * z * z
            })
            .collect();
        let out = Array::new(vy.shape().to_vec(), data)?;
        self.push(out, Op::GaussianLogPdf { y, mu, sigma }, "gaussian_log_pdf")
    }

    /// Reverse accumulation from a scalar `loss` to every node.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` for every parameter leaf reachable from it, in the
    /// order the parameters were first requested.
    pub fn param_gradients(&self, loss: NodeId) -> Result<Vec<(String, Array)>, DiffError> {
        let grads = self.gradients(loss)?;
        Ok(self
            .params
            .iter()
            .filter_map(|(id, name)| grads.get(*id).map(|g| (name.clone(), g.clone())))
            .collect())
    }

    /// Add `d loss / d param` into the gradient slot of every parameter
    /// reachable from `loss`. Gradients accumulate across calls until
    /// [`ParameterStore::zero_grad`] or an Adam step clears them.
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore) -> Result<(), DiffError> {
        let grads = self.gradients(loss)?;
        for (id, name) in &self.params {
            if let Some(g) = grads.get(*id) {
                store
                    .grad_mut(name)
                    .ok_or_else(|| DiffError::UnknownParameter(name.clone()))?
                    .add_assign(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Array>], id: NodeId, delta: Array| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(vb, |g, b| g * b));
                acc(grads, *b, g.zip_map(va, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(vb, |g, b| g / b));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vb.data())
                    .map(|((&g, &a), &b)| -g * a / (b * b))
                    .collect();
                acc(grads, *b, Array::new(vb.shape().to_vec(), gb).expect("shape"));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = G B^T, dB = A^T G
                let bt = transpose(vb.data(), k, n);
                let ga = matmul_raw(g.data(), &bt, m, n, k);
                let at = transpose(va.data(), m, k);
                let gb = matmul_raw(&at, g.data(), k, m, n);
                acc(grads, *a, Array::matrix(m, k, ga).expect("shape"));
                acc(grads, *b, Array::matrix(k, n, gb).expect("shape"));
            }
            Op::Conv1d(args) | Op::Conv2d(args) => {
                let dims = if matches!(node.op, Op::Conv1d(_)) { 1 } else { 2 };
                let geom = self.conv_geometry(args, dims).expect("validated in forward");
                let x = self.value(args.input);
                let w = self.value(args.kernel);
                let (gx, gw, gbias) = conv_backward(&geom, x, w, g);
                acc(grads, args.input, gx);
                acc(grads, args.kernel, gw);
                if let Some(b) = args.bias {
                    acc(grads, b, gbias);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                acc(grads, *a, g.zip_map(va, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                acc(grads, *a, g.zip_map(va, |g, x| g * sigmoid(x)));
            }
            Op::Exp(a) => acc(grads, *a, g.zip_map(&node.value, |g, y| g * y)),
            Op::Log(a) => {
                let va = self.value(*a);
                acc(grads, *a, g.zip_map(va, |g, x| g / x));
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                acc(grads, *a, g.zip_map(va, |g, x| g * sign(x)));
            }
            Op::Powi(a, n) => {
                let va = self.value(*a);
                let n = *n;
                acc(grads, *a, g.zip_map(va, |g, x| g * n as f64 * x.powi(n - 1)));
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(grads, *a, Array::full(self.value(*a).shape(), s));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let s = g.data()[0] / va.len() as f64;
                acc(grads, *a, Array::full(va.shape(), s));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|id| Vec::with_capacity(self.value(*id).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (part, id) in parts.iter_mut().zip(inputs) {
                        let chunk: usize = self.value(*id).shape()[*axis..].iter().product();
                        part.extend_from_slice(&g.data()[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (part, id) in parts.into_iter().zip(inputs) {
                    let shape = self.value(*id).shape().to_vec();
                    acc(grads, *id, Array::new(shape, part).expect("shape"));
                }
            }
            Op::Slice { input, start, len } => {
                let v = self.value(*input);
                let row: usize = v.shape()[1..].iter().product();
                let mut out = Array::zeros(v.shape());
                out.data_mut()[start * row..(start + len) * row].copy_from_slice(g.data());
                acc(grads, *input, out);
            }
            Op::BroadcastScalar(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(grads, *a, Array::full(&shape, g.sum()));
            }
            Op::Repeat(a) => {
                let v = self.value(*a);
                let mut out = Array::zeros(v.shape());
                let row = v.len();
                if row > 0 {
                    for chunk in g.data().chunks_exact(row) {
                        for (o, x) in out.data_mut().iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
                acc(grads, *a, out);
            }
            Op::MeanRows(a) => {
                let v = self.value(*a);
                let n = v.shape()[0];
                let row: Vec<f64> = g.data().iter().map(|x| x / n as f64).collect();
                let out = Array::new(v.shape().to_vec(), row.repeat(n)).expect("shape");
                acc(grads, *a, out);
            }
            Op::Transpose(a) => {
                let [r, c] = *self.value(*a).shape() else { unreachable!() };
                let back = Array::matrix(r, c, transpose(g.data(), c, r)).expect("shape");
                acc(grads, *a, back);
            }
            Op::AddBias { input, bias } => {
                acc(grads, *input, g.clone());
                let cols = self.value(*bias).len();
                let mut gb = vec![0.0; cols];
                if cols > 0 {
                    for row in g.data().chunks_exact(cols) {
                        for (o, x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
                acc(grads, *bias, Array::vector(gb));
            }
            Op::GaussianLogPdf { y, mu, sigma } => {
                let (vy, vm, vs) = (self.value(*y), self.value(*mu), self.value(*sigma));
                let n = vy.len();
                let (mut gy, mut gm, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let s = vs.data()[i];
                    let r = vy.data()[i] - vm.data()[i];
                    let gi = g.data()[i];
                    gy[i] = -gi * r / (s * s);
                    gm[i] = gi * r / (s * s);
                    gs[i] = gi * (r * r / (s * s * s) - 1.0 / s);
                }
                let shape = vy.shape().to_vec();
                acc(grads, *y, Array::new(shape.clone(), gy).expect("shape"));
                acc(grads, *mu, Array::new(shape.clone(), gm).expect("shape"));
                acc(grads, *sigma, Array::new(shape, gs).expect("shape"));
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Plain triple loop; the inner sum runs over `k` in increasing order, which
/// callers rely on for reproducible accumulation.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Convolution geometry shared by the 1-D (`h == 1`, `kh == 1`) and 2-D paths.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    groups: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
}

impl ConvGeometry {
    fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Source index for output position `pos` and kernel tap `tap` along an
    /// axis of length `n` with kernel extent `k`, or `None` in the zero pad.
    fn source(&self, pos: usize, tap: usize, n: usize, k: usize) -> Option<usize> {
        let i = pos as isize + tap as isize - (k as isize - 1) / 2;
        match self.padding {
            Padding::Zero => (0..n as isize).contains(&i).then_some(i as usize),
            Padding::Circular => Some(wrap(i, n)),
        }
    }

    fn output_shape(&self) -> Vec<usize> {
        if self.kh == 1 && self.h == 1 {
            vec![self.c_out, self.w]
        } else {
            vec![self.c_out, self.h, self.w]
        }
    }
}

fn conv_forward(geom: &ConvGeometry, x: &Array, w: &Array, bias: Option<&Array>) -> Array {
    let (h, wd, kh, kw) = (geom.h, geom.w, geom.kh, geom.kw);
    let plane = h * wd;
    let cig = geom.in_per_group();
    let cog = geom.out_per_group();
    let mut out = vec![0.0; geom.c_out * plane];
    let (xd, wdat) = (x.data(), w.data());
    for o in 0..geom.c_out {
        let grp = o / cog;
        let b = bias.map_or(0.0, |b| b.data()[o]);
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = b);
        for ci in 0..cig {
            let c = grp * cig + ci;
            let x_plane = &xd[c * plane..(c + 1) * plane];
            let k_base = (o * cig + ci) * kh * kw;
            for r in 0..h {
                for s in 0..wd {
                    let mut acc = 0.0;
                    for a in 0..kh {
                        let Some(sr) = geom.source(r, a, h, kh) else { continue };
                        for bb in 0..kw {
                            let Some(sc) = geom.source(s, bb, wd, kw) else { continue };
                            acc += wdat[k_base + a * kw + bb] * x_plane[sr * wd + sc];
                        }
                    }
                    out_plane[r * wd + s] += acc;
                }
            }
        }
    }
    Array::new(geom.output_shape(), out).expect("conv output shape")
}

fn conv_backward(geom: &ConvGeometry, x: &Array, w: &Array, g: &Array) -> (Array, Array, Array) {
    let (h, wd, kh, kw) = (geom.h, geom.w, geom.kh, geom.kw);
    let plane = h * wd;
    let cig = geom.in_per_group();
    let cog = geom.out_per_group();
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdat.len()];
    let mut gb = vec![0.0; geom.c_out];
    for o in 0..geom.c_out {
        let grp = o / cog;
        let g_plane = &gd[o * plane..(o + 1) * plane];
        gb[o] = g_plane.iter().sum();
        for ci in 0..cig {
            let c = grp * cig + ci;
            let k_base = (o * cig + ci) * kh * kw;
            for r in 0..h {
                for s in 0..wd {
                    let go = g_plane[r * wd + s];
                    if go == 0.0 {
                        continue;
                    }
                    for a in 0..kh {
                        let Some(sr) = geom.source(r, a, h, kh) else { continue };
                        for bb in 0..kw {
                            let Some(sc) = geom.source(s, bb, wd, kw) else { continue };
                            let xi = c * plane + sr * wd + sc;
                            let wi = k_base + a * kw + bb;
                            gw[wi] += go * xd[xi];
                            gx[xi] += go * wdat[wi];
                        }
                    }
                }
            }
        }
    }
    (
        Array::new(x.shape().to_vec(), gx).expect("shape"),
        Array::new(w.shape().to_vec(), gw).expect("shape"),
        Array::vector(gb),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softplus_at_zero_is_log_two() {
        let mut g = Graph::new();
        let x = g.constant(Array::scalar(0.0));
        let y = g.softplus(x).unwrap();
        assert!(close(g.value(y).data()[0], 2f64.ln(), 1e-15));
        assert!(close(g.value(y).data()[0], 0.6931, 1e-4));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Array::vector(vec![-800.0, 800.0]));
        let y = g.softplus(x).unwrap();
        assert_eq!(g.value(y).data()[1], 800.0);
        assert!(g.value(y).data()[0] >= 0.0);
    }

    #[test]
    fn conv1d_impulse_reads_kernel_center() {
        let mut g = Graph::new();
        let x = g.constant(Array::new(vec![1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let k = g.constant(Array::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.conv1d(x, k, None, Padding::Zero, 1).unwrap();
        assert_eq!(g.value(y).data()[2], 2.0);
    }

    #[test]
    fn conv1d_is_cross_correlation() {
        // Impulse at position 2: out[t] = sum_j w[j] x[t + j - 1], so the
        // kernel appears reversed around the impulse: out = [0, 3, 2, 1, 0].
        let mut g = Graph::new();
        let x = g.constant(Array::new(vec![1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let k = g.constant(Array::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.conv1d(x, k, None, Padding::Zero, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn circular_padding_wraps() {
        let mut g = Graph::new();
        let x = g.constant(Array::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let k = g.constant(Array::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.conv1d(x, k, None, Padding::Circular, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 1.0, 0.0, 3.0]);
    }

    #[test]
    fn even_kernels_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Array::zeros(&[1, 5]));
        let k = g.constant(Array::zeros(&[1, 1, 2]));
        assert!(matches!(
            g.conv1d(x, k, None, Padding::Zero, 1),
            Err(DiffError::InvalidArgument(_))
        ));
    }

    #[test]
    fn gaussian_log_pdf_at_mean() {
        let mut g = Graph::new();
        let y = g.constant(Array::scalar(0.3));
        let mu = g.constant(Array::scalar(0.3));
        let s = g.constant(Array::scalar(1.0));
        let lp = g.gaussian_log_pdf(y, mu, s).unwrap();
        assert!(close(g.value(lp).data()[0], -0.9189385332, 1e-9));
    }

    #[test]
    fn gaussian_log_pdf_rejects_non_positive_sigma() {
        let mut g = Graph::new();
        let y = g.constant(Array::scalar(0.0));
        let s = g.constant(Array::scalar(0.0));
        assert!(matches!(
            g.gaussian_log_pdf(y, y, s),
            Err(DiffError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let err = g.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(Array::scalar(1000.0));
        assert!(matches!(g.exp(a), Err(DiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.constant(Array::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Array::ones(&[2, 3]));
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.constant(Array::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(g.gradients(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Array::scalar(1.0));
        let unused = g.constant(Array::scalar(2.0));
        let s = g.sum(x).unwrap();
        let grads = g.gradients(s).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn empty_inner_dimension_matmul_gives_zeros() {
        let mut g = Graph::new();
        let a = g.constant(Array::zeros(&[3, 0]));
        let b = g.constant(Array::zeros(&[0, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Array::zeros(&[3, 4]));
    }

    #[test]
    fn concat_along_columns() {
        let mut g = Graph::new();
        let a = g.constant(Array::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Array::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(g.value(c).shape(), &[2, 3]);
    }
}
