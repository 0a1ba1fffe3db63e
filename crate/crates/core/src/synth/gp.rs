use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use super::SynthError;
use crate::kernels::{jittered_cholesky, KernelSpec};
use crate::rng::rng;

/// Draw `f(xs)` for `f ~ GP(0, spec)`: `L z` with `L` the jittered Cholesky
/// factor of the Gram matrix and `z` standard normal.
pub fn gp_sample(spec: &KernelSpec, xs: &[f64], seed: u64) -> Result<Vec<f64>, SynthError> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(SynthError::InvalidConfig("gp_sample: non-finite input".into()));
    }
    let (chol, _) = jittered_cholesky(&spec.gram(xs)).ok_or(SynthError::Cholesky)?;
    let mut r = rng(seed);
    let z = DVector::from_fn(xs.len(), |_, _| StandardNormal.sample(&mut r));
    Ok((chol.l() * z).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_inputs_give_empty_sample() {
        assert!(gp_sample(&KernelSpec::eq(), &[], 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let xs = [0.0, 0.3, 1.1];
        let a = gp_sample(&KernelSpec::matern52(), &xs, 9).unwrap();
        let b = gp_sample(&KernelSpec::matern52(), &xs, 9).unwrap();
        let c = gp_sample(&KernelSpec::matern52(), &xs, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_point_variance_is_one() {
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|s| gp_sample(&KernelSpec::eq(), &[0.4], s).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn correlation_matches_kernel() {
        let n = 10_000;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for s in 0..n {
            let v = gp_sample(&KernelSpec::eq(), &[0.0, 0.25], s).unwrap();
            sxy += v[0] * v[1];
            sxx += v[0] * v[0];
            syy += v[1] * v[1];
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!((corr - KernelSpec::eq().eval(0.0, 0.25)).abs() < 0.03, "corr {corr}");
    }
}
