use rand::Rng;

use crate::rng::rng;

/// One realisation of the truncated sawtooth series
/// `A/2 - (A/pi) sum_{k=1}^{K} (-1)^k sin(2 pi k f (t - s)) / k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sawtooth {
    pub amplitude: f64,
    pub frequency: f64,
    pub n_terms: u32,
    pub shift: f64,
}

impl Sawtooth {
    /// Unit amplitude, `f ~ U[3, 5]`, `K ~ U{10..20}`, `s ~ center + U[-5, 5]`.
    pub fn sample<R: Rng>(rng: &mut R, center: f64) -> Self {
        let frequency = rng.random_range(3.0..=5.0);
        let n_terms = rng.random_range(10..=20);
        let shift = center + rng.random_range(-5.0..=5.0);
        Self {
            amplitude: 1.0,
            frequency,
            n_terms,
            shift,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let u = 2.0 * std::f64::consts::PI * self.frequency * (t - self.shift);
        let series: f64 = (1..=self.n_terms)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign * (k as f64 * u).sin() / k as f64
            })
            .sum();
        self.amplitude / 2.0 - self.amplitude / std::f64::consts::PI * series
    }
}

/// Evaluate a freshly sampled sawtooth (centred at 0) at `xs`.
pub fn sawtooth_sample(xs: &[f64], seed: u64) -> Vec<f64> {
    let wave = Sawtooth::sample(&mut rng(seed), 0.0);
    xs.iter().map(|&x| wave.eval(x)).collect()
}
