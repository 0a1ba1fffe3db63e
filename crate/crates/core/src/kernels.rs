//! Stationary kernels for data generation, plus the learnable EQ kernel used
//! by the encoder (`psi`) and the readout (`psi_rho`).

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::diff::{Array, DiffError, Graph, NodeId};

/// Data-generating kernels for 1-D Gaussian processes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `amplitude * exp(-0.5 ((x - x') / length_scale)^2)`.
    Eq { length_scale: f64, amplitude: f64 },
    /// Matérn-5/2 on `d = input_scale * |x - x'|`:
    /// `(1 + sqrt(5) d + 5/3 d^2) exp(-sqrt(5) d)`.
    Matern52 { input_scale: f64 },
    /// `exp(-0.5 (f1(x) - f1(x'))^2 - 0.5 (f2(x) - f2(x'))^2) * exp(-0.5 ((x - x') / envelope_scale)^2)`
    /// with `f1 = cos(2 pi periodic_scale x)` and `f2 = sin(2 pi periodic_scale x)`.
    WeaklyPeriodic { periodic_scale: f64, envelope_scale: f64 },
}

impl KernelSpec {
    /// EQ with length scale 0.25 and unit amplitude.
    pub const fn eq() -> Self {
        KernelSpec::Eq {
            length_scale: 0.25,
            amplitude: 1.0,
        }
    }

    /// Matérn-5/2 with the inputs rescaled by 4 (length scale 0.25).
    pub const fn matern52() -> Self {
        KernelSpec::Matern52 { input_scale: 4.0 }
    }

    /// Periodic part `cos/sin(8 pi x)`, envelope `exp(-(x - x')^2 / 8)`.
    pub const fn weakly_periodic() -> Self {
        KernelSpec::WeaklyPeriodic {
            periodic_scale: 4.0,
            envelope_scale: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            KernelSpec::Eq {
                length_scale,
                amplitude,
            } => length_scale > 0.0 && amplitude > 0.0,
            KernelSpec::Matern52 { input_scale } => input_scale > 0.0,
            KernelSpec::WeaklyPeriodic {
                periodic_scale,
                envelope_scale,
            } => periodic_scale > 0.0 && envelope_scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("kernel parameters must be positive: {self:?}"))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Eq { .. } => "eq",
            KernelSpec::Matern52 { .. } => "matern52",
            KernelSpec::WeaklyPeriodic { .. } => "weakly_periodic",
        }
    }

    pub fn eval(&self, x: f64, x2: f64) -> f64 {
        match *self {
            KernelSpec::Eq {
                length_scale,
                amplitude,
            } => {
                let r = (x - x2) / length_scale;
                amplitude * (-0.5 * r * r).exp()
            }
            KernelSpec::Matern52 { input_scale } => {
                let d = input_scale * (x - x2).abs();
                let s5 = 5f64.sqrt();
                (1.0 + s5 * d + 5.0 / 3.0 * d * d) * (-s5 * d).exp()
            }
            KernelSpec::WeaklyPeriodic {
                periodic_scale,
                envelope_scale,
            } => {
                let w = 2.0 * std::f64::consts::PI * periodic_scale;
                let d1 = (w * x).cos() - (w * x2).cos();
                let d2 = (w * x).sin() - (w * x2).sin();
                let r = (x - x2) / envelope_scale;
                (-0.5 * d1 * d1 - 0.5 * d2 * d2).exp() * (-0.5 * r * r).exp()
            }
        }
    }

    /// Symmetric matrix of pairwise evaluations.
    pub fn gram(&self, xs: &[f64]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(xs[i], xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// `K(xs, ys)` of shape `(xs.len(), ys.len())`.
    pub fn cross(&self, xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), ys.len(), |i, j| self.eval(xs[i], ys[j]))
    }
}

/// Relative jitter added to Gram diagonals before factorisation.
pub const JITTER: f64 = 1e-6;

/// Factorise `k + jitter * I` where `jitter = JITTER * mean(diag(k))`,
/// multiplying the jitter by 10 up to three more times on failure.
///
/// Returns the factor together with the jitter that succeeded.
pub fn jittered_cholesky(k: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mean_diag = if n == 0 { 1.0 } else { k.diagonal().mean() };
    let mut jitter = JITTER * mean_diag.abs().max(f64::MIN_POSITIVE);
    for _ in 0..4 {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Some((c, jitter));
        }
        jitter *= 10.0;
    }
    None
}

/// EQ kernel with a trainable log length scale, evaluated on the graph.
#[derive(Clone, Debug)]
pub struct LearnableEq {
    /// Name of the scalar `log_length_scale` parameter.
    pub param: String,
}

impl LearnableEq {
    pub fn new(param: impl Into<String>) -> Self {
        Self {
            param: param.into(),
        }
    }

    /// Initial length scale: twice the grid spacing `1 / density`.
    pub fn initial_length_scale(density: f64) -> f64 {
        2.0 / density
    }

    /// `exp(-0.5 d^2 / l^2)` elementwise over squared distances `sq_dists`,
    /// with `l = exp(log_length_scale)`.
    pub fn eval_sq(&self, g: &mut Graph, log_ls: NodeId, sq_dists: &Array) -> Result<NodeId, DiffError> {
        let d2 = g.constant(sq_dists.clone());
        let inv_l2 = g.scale(log_ls, -2.0)?;
        let inv_l2 = g.exp(inv_l2)?;
        let inv_l2 = g.broadcast_scalar(inv_l2, sq_dists.shape())?;
        let r2 = g.mul(d2, inv_l2)?;
        let e = g.scale(r2, -0.5)?;
        g.exp(e)
    }

    /// Same as [`Self::eval_sq`] for plain distances.
    pub fn eval(&self, g: &mut Graph, log_ls: NodeId, distances: &Array) -> Result<NodeId, DiffError> {
        self.eval_sq(g, log_ls, &distances.map(|d| d * d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, ParameterStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const ALL: [KernelSpec; 3] = [KernelSpec::eq(), KernelSpec::matern52(), KernelSpec::weakly_periodic()];

    #[test]
    fn unit_diagonal() {
        for k in ALL {
            for x in [-3.0, 0.0, 0.17, 5.5] {
                assert!((k.eval(x, x) - 1.0).abs() < 1e-15, "{k:?}");
            }
        }
    }

    #[test]
    fn eq_at_one_length_scale() {
        let v = KernelSpec::eq().eval(0.0, 0.25);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn weakly_periodic_matches_identity_form() {
        // (cos a - cos b)^2 + (sin a - sin b)^2 = 2 - 2 cos(a - b).
        let oracle = |x: f64, y: f64| {
            let w = 8.0 * std::f64::consts::PI;
            (-(1.0 - (w * (x - y)).cos())).exp() * (-(x - y).powi(2) / 8.0).exp()
        };
        let k = KernelSpec::weakly_periodic();
        assert!((k.eval(0.0, 0.25) - oracle(0.0, 0.25)).abs() < 1e-12);
        // One full period apart: only the envelope remains.
        assert!((k.eval(0.0, 0.25) - (-0.0078125f64).exp()).abs() < 1e-12);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (x, y) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            assert!((k.eval(x, y) - oracle(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn decays_at_ten_length_scales() {
        assert!(KernelSpec::eq().eval(0.0, 2.5) < 1e-20);
        assert!(KernelSpec::matern52().eval(0.0, 2.5) < 1e-6);
    }

    #[test]
    fn stationary_and_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for k in ALL {
            for _ in 0..500 {
                let x: f64 = rng.random_range(-4.0..4.0);
                let y: f64 = rng.random_range(-4.0..4.0);
                let tau: f64 = rng.random_range(-4.0..4.0);
                assert_eq!(k.eval(x, y), k.eval(y, x));
                assert!((k.eval(x + tau, y + tau) - k.eval(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eq_is_non_negative() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let (x, y) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            assert!(KernelSpec::eq().eval(x, y) >= 0.0);
        }
    }

    #[test]
    fn gram_single_point_and_symmetry() {
        let g = KernelSpec::eq().gram(&[0.3]);
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 1.0);
        let xs = [0.1, -1.0, 0.4, 2.2, 0.0];
        for k in ALL {
            let g = k.gram(&xs);
            assert_eq!(g, g.transpose());
        }
    }

    #[test]
    fn gram_is_psd_with_jitter() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for k in ALL {
            for _ in 0..1000 {
                let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mut m = k.gram(&xs);
                for i in 0..20 {
                    m[(i, i)] += JITTER;
                }
                assert!(Cholesky::new(m).is_some(), "{k:?} failed on {xs:?}");
            }
        }
    }

    #[test]
    fn learnable_eq_is_one_at_zero_distance() {
        for log_ls in [-3.0, 0.0, 2.0] {
            let mut g = Graph::new();
            let l = g.constant(Array::scalar(log_ls));
            let out = LearnableEq::new("psi").eval(&mut g, l, &Array::vector(vec![0.0])).unwrap();
            assert_eq!(g.value(out).data(), &[1.0]);
        }
    }

    #[test]
    fn initial_length_scale_is_twice_spacing() {
        assert_eq!(LearnableEq::initial_length_scale(64.0), 0.03125);
    }

    #[test]
    fn learnable_eq_gradient_at_one_length_scale() {
        let ls: f64 = 0.3;
        let mut store = ParameterStore::new();
        store.insert("psi", Array::scalar(ls.ln())).unwrap();
        let k = LearnableEq::new("psi");
        let report = grad_check(
            |g, s| {
                let l = g.param(s, "psi")?;
                let v = k.eval(g, l, &Array::vector(vec![ls]))?;
                g.sum(v)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
