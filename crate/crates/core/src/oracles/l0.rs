//! Monte-Carlo estimate of the expected number of open gates.

use rand::Rng;

use crate::masking::{hard_concrete_sample, uniform_noise, HardConcreteParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl MonteCarloEstimate {
    /// Distance from `value` in standard errors.
    pub fn z_score(&self, value: f64) -> f64 {
        if self.std_error == 0.0 {
            if self.mean == value {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - value).abs() / self.std_error
        }
    }
}

/// Mean and standard error of the number of nonzero gates per draw.
pub fn monte_carlo_l0<R: Rng + ?Sized>(
    scores: &Tensor2D,
    params: &HardConcreteParams,
    samples: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    if samples < 2 {
        return Err(Error::config("Monte-Carlo estimate needs at least two samples"));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let noise = uniform_noise(scores.rows(), scores.cols(), rng);
        let count = hard_concrete_sample(scores, params, &noise)?.mask.kept() as f64;
        sum += count;
        sum_sq += count * count;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / n).sqrt(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::expected_l0;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_gates_are_closed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = HardConcreteParams::default();
        let est = monte_carlo_l0(&Tensor2D::scalar(-50.0), &p, 10_000, &mut rng).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn zero_score_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = HardConcreteParams::default();
        let s = Tensor2D::scalar(0.0);
        let est = monte_carlo_l0(&s, &p, 100_000, &mut rng).unwrap();
        assert!(est.z_score(expected_l0(&s, &p)) < 3.0, "{est:?}");
    }
}
