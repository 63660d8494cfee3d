//! Optional sinusoid-regression family for MSE-mode smoke tests.
//! Classification remains the canonical stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ndcore::Tensor;

/// A regression context: `y = amplitude * sin(x + phase)` on `x in [-5, 5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineTask {
    pub fn draw(rng: &mut ChaCha8Rng) -> SineTask {
        SineTask {
            amplitude: rng.gen_range(0.1..5.0),
            phase: rng.gen_range(0.0..std::f64::consts::PI),
        }
    }

    /// `n` samples as column tensors `(x, y)`.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| self.amplitude * (x + self.phase).sin())
            .collect();
        (Tensor::col(xs), Tensor::col(ys))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{rng_streams, seeded_rng};

    #[test]
    fn samples_lie_on_the_curve() {
        let mut rng = seeded_rng(1, rng_streams::EPISODE);
        let task = SineTask::draw(&mut rng);
        let (x, y) = task.sample(50, &mut rng);
        for i in 0..50 {
            let want = task.amplitude * (x.get(i, 0) + task.phase).sin();
            assert!((y.get(i, 0) - want).abs() <= 1e-12);
        }
    }
}
