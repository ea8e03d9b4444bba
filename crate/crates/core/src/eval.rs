//! Trajectory MSE-to-teacher: the mean squared difference between a
//! model's sampling trajectory and the teacher's from the same initial
//! noise, averaged over every state of every trajectory.

use crate::diffusion::sampler::{initial_noise, run_trajectory, Denoiser};
use crate::diffusion::schedule::{sampling_steps, NoiseSchedule};
use crate::error::Result;
use crate::par::{self, Exec};
use crate::rng::substream_seed;
use crate::tensor::Tensor;

/// Samples handled by one worker.
const CHUNK: usize = 8;

/// Teacher trajectories for a fixed seed set, reusable across students.
pub struct ReferenceTrajectories {
    steps: Vec<usize>,
    seed: u64,
    chunks: Vec<(usize, usize)>,
    trajectories: Vec<Vec<Tensor>>,
}

impl ReferenceTrajectories {
    pub fn new<D: Denoiser + ?Sized>(
        teacher: &D,
        schedule: &NoiseSchedule,
        num_steps: usize,
        seed: u64,
        samples: usize,
        exec: Exec,
    ) -> Result<Self> {
        let steps = sampling_steps(schedule.total_steps(), num_steps)?;
        let seed = substream_seed(seed, "eval");
        let chunks: Vec<(usize, usize)> = (0..samples)
            .step_by(CHUNK)
            .map(|a| (a, (a + CHUNK).min(samples)))
            .collect();
        let trajectories = par::try_map(exec, &chunks, |&(a, b)| {
            let x = initial_noise(teacher.sample_shape(), seed, a, b - a)?;
            run_trajectory(teacher, schedule, &steps, x)
        })?;
        Ok(Self {
            steps,
            seed,
            chunks,
            trajectories,
        })
    }

    pub fn final_samples(&self) -> Result<Tensor> {
        let last: Vec<Tensor> = self
            .trajectories
            .iter()
            .map(|t| t.last().unwrap().clone())
            .collect();
        Tensor::concat_rows(&last)
    }

    /// Trajectory MSE of `student` against the stored teacher trajectories.
    pub fn mse<D: Denoiser + ?Sized>(
        &self,
        student: &D,
        schedule: &NoiseSchedule,
        exec: Exec,
    ) -> Result<f64> {
        let items: Vec<usize> = (0..self.chunks.len()).collect();
        let sums = par::try_map(exec, &items, |&i| -> Result<(f64, usize)> {
            let (a, b) = self.chunks[i];
            let x = initial_noise(student.sample_shape(), self.seed, a, b - a)?;
            let traj = run_trajectory(student, schedule, &self.steps, x)?;
            let mut sum = 0.0;
            let mut count = 0;
            for (s, r) in traj.iter().zip(&self.trajectories[i]) {
                sum += s
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(&p, &q)| ((p - q) as f64).powi(2))
                    .sum::<f64>();
                count += s.len();
            }
            Ok((sum, count))
        })?;
        let (sum, count) = sums.iter().fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
        Ok(sum / count as f64)
    }
}

/// One-off trajectory MSE of `student` against `teacher`.
pub fn trajectory_mse<A: Denoiser + ?Sized, B: Denoiser + ?Sized>(
    teacher: &A,
    student: &B,
    schedule: &NoiseSchedule,
    num_steps: usize,
    seed: u64,
    samples: usize,
    exec: Exec,
) -> Result<f64> {
    ReferenceTrajectories::new(teacher, schedule, num_steps, seed, samples, exec)?
        .mse(student, schedule, exec)
}
