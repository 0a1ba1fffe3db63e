//! Numerical audits of the symmetry properties: permutation invariance in
//! the context set, translation equivariance off the grid and circular-shift
//! equivariance on the grid.

use anyhow::Result;
use rand::seq::SliceRandom;

use convcnp::diff::{Array, ParameterStore};
use convcnp::models::{CnnVariant, ConvCnp, Model, OnGridConvCnp, PredictiveDistribution};
use convcnp::rng::rng;
use convcnp::synth::Task;

fn max_abs_diff(a: &PredictiveDistribution, b: &PredictiveDistribution) -> f64 {
    a.mean
        .iter()
        .zip(&b.mean)
        .chain(a.std.iter().zip(&b.std))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest change in any prediction when each task's context is shuffled.
pub fn permutation_deviation(model: &dyn Model, params: &ParameterStore, tasks: &[Task], seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for task in tasks {
        let mut shuffled = task.clone();
        shuffled.context.shuffle(&mut r);
        let a = model.predict(params, task)?;
        let b = model.predict(params, &shuffled)?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok(worst)
}

/// Largest difference between predictions on translated tasks and the
/// untranslated predictions.
pub fn translation_deviation(model: &dyn Model, params: &ParameterStore, tasks: &[Task], tau: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for task in tasks {
        let a = model.predict(params, task)?;
        let b = model.predict(params, &task.translated(tau))?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    Ok(worst)
}

pub const SWEEP_DENSITIES: [f64; 3] = [16.0, 32.0, 64.0];
pub const SWEEP_SHIFTS: [f64; 3] = [0.1234, 0.37, 1.618];
pub const SWEEP_LENGTH_SCALE: f64 = 0.1;
/// Wide enough that zero padding at the grid edge never reaches a target
/// through the readout basis at any swept density.
pub const SWEEP_MARGIN: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub density: f64,
    pub max_deviation: f64,
    /// Largest predicted mean or scale magnitude on the untranslated tasks.
    /// The readout is an unnormalised sum over grid points, so this grows
    /// with the density for fixed weights.
    pub output_scale: f64,
}

/// Translation deviation for shifts that are not grid multiples, as a
/// function of grid density. The same CNN weights are used at every density,
/// both length scales are pinned to `length_scale` and the grid margin is
/// `margin` input units throughout, so that only the grid resolution changes.
pub fn quantization_sweep(
    densities: &[f64],
    taus: &[f64],
    tasks: &[Task],
    init_seed: u64,
    length_scale: f64,
    margin: f64,
) -> Result<Vec<SweepPoint>> {
    densities
        .iter()
        .map(|&density| {
            let model =
                ConvCnp::new(CnnVariant::Small, density, tasks.first().map_or(1, Task::dim_y)).with_margin(margin);
            let mut params = model.init_params(init_seed)?;
            for name in ["encoder.log_length_scale", "decoder.log_length_scale"] {
                *params.value_mut(name).expect("length-scale parameter") = Array::scalar(length_scale.ln());
            }
            let mut max_deviation = 0.0f64;
            for &tau in taus {
                max_deviation = max_deviation.max(translation_deviation(&model, &params, tasks, tau)?);
            }
            let mut output_scale = 0.0f64;
            for task in tasks {
                let p = model.predict(&params, task)?;
                output_scale = p.mean.iter().chain(&p.std).fold(output_scale, |m, v| m.max(v.abs()));
            }
            Ok(SweepPoint {
                density,
                max_deviation,
                output_scale,
            })
        })
        .collect()
}

/// Roll the last `shifts.len()` axes of `a` by the given offsets.
pub fn roll(a: &Array, shifts: &[isize]) -> Array {
    let shape = a.shape();
    let k = shifts.len();
    let lead: usize = shape[..shape.len() - k].iter().product();
    let dims = &shape[shape.len() - k..];
    let block: usize = dims.iter().product();
    let mut out = Array::zeros(shape);
    for b in 0..lead {
        for i in 0..block {
            let mut rem = i;
            let mut dst = 0;
            for (d, (&n, &s)) in dims.iter().zip(shifts).enumerate().rev() {
                let idx = rem % n;
                rem /= n;
                let stride: usize = dims[d + 1..].iter().product();
                dst += (idx as isize + s).rem_euclid(n as isize) as usize * stride;
            }
            out.data_mut()[b * block + dst] = a.data()[b * block + i];
        }
    }
    out
}

/// Largest difference between predictions for a circularly shifted image
/// and masks and the shifted predictions of the original inputs.
pub fn circular_shift_deviation(
    model: &OnGridConvCnp,
    params: &ParameterStore,
    image: &Array,
    context_mask: &Array,
    target_mask: &Array,
    shifts: &[isize],
) -> Result<f64> {
    let base = model.predict_grid(params, image, context_mask, target_mask)?;
    let moved = model.predict_grid(
        params,
        &roll(image, shifts),
        &roll(context_mask, shifts),
        &roll(target_mask, shifts),
    )?;
    let dm = roll(&base.mean, shifts).max_abs_diff(&moved.mean);
    let ds = roll(&base.std, shifts).max_abs_diff(&moved.std);
    Ok(dm.max(ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_moves_entries() {
        let a = Array::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = roll(&a, &[1, 1]);
        // Row 0 -> row 1, column j -> column j + 1.
        assert_eq!(r.data(), &[5.0, 3.0, 4.0, 2.0, 0.0, 1.0]);
        let v = roll(&Array::vector(vec![1.0, 2.0, 3.0]), &[-1]);
        assert_eq!(v.data(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn roll_leading_axes_untouched() {
        let a = Array::new(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = roll(&a, &[0, 2]);
        assert_eq!(r.data(), &[1.0, 2.0, 0.0, 4.0, 5.0, 3.0]);
        assert_eq!(roll(&r, &[0, -2]), a);
    }
}
