use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear beta schedule over steps `1..=T`. Index 0 of every array is step 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total_steps < 2 {
        return Err(Error::Contract(format!(
            "schedule needs T >= 2, got {total_steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Contract(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = (0..total_steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` for `t ∈ [0, T]`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `x_t = √ᾱ_t · x_0 + √(1 - ᾱ_t) · ε`.
    pub fn corrupt(&self, x0: &Tensor, noise: &Tensor, t: usize) -> Tensor {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&x, &e)| a * x + b * e)
            .collect();
        Tensor::new(x0.shape(), data).unwrap()
    }
}

/// Uniform sub-schedule of `num_steps` steps, descending:
/// `1 + i·⌊T/num_steps⌋` for `i = num_steps-1 … 0`.
pub fn sampling_steps(total_steps: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total_steps {
        return Err(Error::Contract(format!(
            "need 1 <= num_steps <= T, got {num_steps} for T={total_steps}"
        )));
    }
    let stride = total_steps / num_steps;
    Ok((0..num_steps).rev().map(|i| 1 + i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_constant_schedule() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert_eq!(s.betas, vec![0.1, 0.1]);
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bars[1] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        let last = *s.alpha_bars.last().unwrap();
        // closed form: prod(1 - beta_i); ln ≈ -Σβ = -1.0001 → ≈ 0.366
        let closed: f64 = s.betas.iter().map(|b| (1.0 - b).ln()).sum::<f64>().exp();
        assert!((last - closed).abs() < 1e-12);
        assert!(last > 0.0 && last < 0.5);
        assert!(s.alpha_bars[0] > 0.999);
    }

    #[test]
    fn bounds_enforced() {
        assert!(make_schedule(100, 1e-4, 1.5).is_err());
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
    }

    #[test]
    fn sub_schedules() {
        assert_eq!(sampling_steps(100, 20).unwrap()[..3], [96, 91, 86]);
        assert_eq!(*sampling_steps(100, 20).unwrap().last().unwrap(), 1);
        assert_eq!(
            sampling_steps(10, 10).unwrap(),
            (1..=10).rev().collect::<Vec<_>>()
        );
        assert!(sampling_steps(10, 11).is_err());
    }
}
