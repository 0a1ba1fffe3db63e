//! Gradient checks of every primitive op on random inputs.
//!
//! Each case feeds random parameters through one op and contracts the output
//! with fixed random weights, so every output element carries a nonzero
//! upstream gradient. Inputs to `relu` and `abs` stay away from zero, and
//! inputs to `log`, `div` and the Gaussian scale stay away from zero too.

use rand::Rng as _;

use super::{grad_check, Array, DiffError, Graph, NodeId, Padding, ParameterStore};
use crate::rng::{rng, Rng};

type Build = Box<dyn Fn(&mut Graph, &ParameterStore) -> Result<NodeId, DiffError>>;

struct Case {
    name: &'static str,
    params: ParameterStore,
    build: Build,
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values in `lo..hi` with a random sign.
fn signed(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let mut a = uniform(r, shape, lo, hi);
    for v in a.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    a
}

fn store(entries: Vec<(&str, Array)>) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (name, value) in entries {
        s.insert(name, value).expect("distinct names");
    }
    s
}

fn w(r: &mut Rng, shape: &[usize]) -> Array {
    uniform(r, shape, -1.0, 1.0)
}

/// `sum(w * out)` for a fixed random `w` shaped like `out`.
fn contract(g: &mut Graph, out: NodeId, w: &Array) -> Result<NodeId, DiffError> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn unary(
    name: &'static str,
    x: Array,
    w: Array,
    op: impl Fn(&mut Graph, NodeId) -> Result<NodeId, DiffError> + 'static,
) -> Case {
    Case {
        name,
        params: store(vec![("x", x)]),
        build: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let y = op(g, x)?;
            contract(g, y, &w)
        }),
    }
}

fn binary(
    name: &'static str,
    a: Array,
    b: Array,
    w: Array,
    op: impl Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId, DiffError> + 'static,
) -> Case {
    Case {
        name,
        params: store(vec![("a", a), ("b", b)]),
        build: Box::new(move |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = op(g, a, b)?;
            contract(g, y, &w)
        }),
    }
}

fn conv_case(r: &mut Rng, name: &'static str, dims: usize, padding: Padding, groups: usize) -> Case {
    let (cin, cout, k, len) = (2 * groups, 2 * groups, 3, 5);
    let mut xs = vec![cin];
    let mut ks = vec![cout, cin / groups];
    let mut os = vec![cout];
    for _ in 0..dims {
        xs.push(len);
        ks.push(k);
        os.push(len);
    }
    let params = store(vec![
        ("x", uniform(r, &xs, -1.0, 1.0)),
        ("k", uniform(r, &ks, -1.0, 1.0)),
        ("b", uniform(r, &[cout], -1.0, 1.0)),
    ]);
    let w = uniform(r, &os, -1.0, 1.0);
    Case {
        name,
        params,
        build: Box::new(move |g, s| {
            let x = g.param(s, "x")?;
            let k = g.param(s, "k")?;
            let b = g.param(s, "b")?;
            let y = if dims == 1 {
                g.conv1d(x, k, Some(b), padding, groups)?
            } else {
                g.conv2d(x, k, Some(b), padding, groups)?
            };
            contract(g, y, &w)
        }),
    }
}

fn cases(seed: u64) -> Vec<Case> {
    let r = &mut rng(seed);
    let s = [3, 4];
    let mut out = vec![
        binary("add", uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), w(r, &s), |g, a, b| g.add(a, b)),
        binary("sub", uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), w(r, &s), |g, a, b| g.sub(a, b)),
        binary("mul", uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), w(r, &s), |g, a, b| g.mul(a, b)),
        binary("div", uniform(r, &s, -1.0, 1.0), signed(r, &s, 0.5, 2.0), w(r, &s), |g, a, b| g.div(a, b)),
        binary("matmul", uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0), w(r, &[3, 2]), |g, a, b| {
            g.matmul(a, b)
        }),
        binary("add_bias", uniform(r, &s, -1.0, 1.0), uniform(r, &[4], -1.0, 1.0), w(r, &s), |g, a, b| g.add_bias(a, b)),
        binary("concat", uniform(r, &[2, 4], -1.0, 1.0), uniform(r, &[1, 4], -1.0, 1.0), w(r, &[3, 4]), |g, a, b| {
            g.concat(&[a, b], 0)
        }),
        binary("concat_axis1", uniform(r, &[3, 2], -1.0, 1.0), uniform(r, &[3, 1], -1.0, 1.0), w(r, &[3, 3]), |g, a, b| {
            g.concat(&[a, b], 1)
        }),
        unary("relu", signed(r, &s, 0.1, 1.0), w(r, &s), |g, x| g.relu(x)),
        unary("abs", signed(r, &s, 0.1, 1.0), w(r, &s), |g, x| g.abs(x)),
        unary("softplus", uniform(r, &s, -3.0, 3.0), w(r, &s), |g, x| g.softplus(x)),
        unary("exp", uniform(r, &s, -1.0, 1.0), w(r, &s), |g, x| g.exp(x)),
        unary("log", uniform(r, &s, 0.5, 2.0), w(r, &s), |g, x| g.log(x)),
        unary("powi", uniform(r, &s, -1.5, 1.5), w(r, &s), |g, x| g.powi(x, 3)),
        unary("scale", uniform(r, &s, -1.0, 1.0), w(r, &s), |g, x| g.scale(x, -1.7)),
        unary("add_scalar", uniform(r, &s, -1.0, 1.0), w(r, &s), |g, x| g.add_scalar(x, 0.3)),
        unary("sum", uniform(r, &s, -1.0, 1.0), w(r, &[]), |g, x| g.sum(x)),
        unary("mean", uniform(r, &s, -1.0, 1.0), w(r, &[]), |g, x| g.mean(x)),
        unary("slice", uniform(r, &[4, 3], -1.0, 1.0), w(r, &[2, 3]), |g, x| g.slice(x, 1, 2)),
        unary("broadcast_scalar", uniform(r, &[1], -1.0, 1.0), w(r, &s), |g, x| g.broadcast_scalar(x, &[3, 4])),
        unary("repeat", uniform(r, &[1, 4], -1.0, 1.0), w(r, &[3, 4]), |g, x| g.repeat(x, 3)),
        unary("mean_rows", uniform(r, &s, -1.0, 1.0), w(r, &[1, 4]), |g, x| g.mean_rows(x)),
        unary("transpose", uniform(r, &s, -1.0, 1.0), w(r, &[4, 3]), |g, x| g.transpose(x)),
    ];
    let params = store(vec![
        ("y", uniform(r, &s, -1.0, 1.0)),
        ("mu", uniform(r, &s, -1.0, 1.0)),
        ("sigma", uniform(r, &s, 0.5, 2.0)),
    ]);
    let w = uniform(r, &s, -1.0, 1.0);
    out.push(Case {
        name: "gaussian_log_pdf",
        params,
        build: Box::new(move |g, s| {
            let y = g.param(s, "y")?;
            let mu = g.param(s, "mu")?;
            let sigma = g.param(s, "sigma")?;
            let l = g.gaussian_log_pdf(y, mu, sigma)?;
            contract(g, l, &w)
        }),
    });
    out.push(conv_case(r, "conv1d_zero", 1, Padding::Zero, 1));
    out.push(conv_case(r, "conv1d_circular", 1, Padding::Circular, 1));
    out.push(conv_case(r, "conv1d_grouped", 1, Padding::Zero, 2));
    out.push(conv_case(r, "conv2d_zero", 2, Padding::Zero, 1));
    out.push(conv_case(r, "conv2d_circular", 2, Padding::Circular, 1));
    out.push(conv_case(r, "conv2d_grouped", 2, Padding::Circular, 2));
    out
}

/// Names of the ops covered by [`check_primitive_ops`], in order.
pub fn primitive_op_names() -> Vec<&'static str> {
    cases(0).iter().map(|c| c.name).collect()
}

/// Maximum relative gradient error of every primitive op for one seed.
pub fn check_primitive_ops(seed: u64, step: f64) -> Result<Vec<(&'static str, f64)>, DiffError> {
    cases(seed)
        .into_iter()
        .map(|c| Ok((c.name, grad_check(&c.build, &c.params, step)?.max_rel_error)))
        .collect()
}
