//! Deterministic DDIM sampling.

use crate::diffusion::schedule::{sampling_steps, NoiseSchedule};
use crate::diffusion::unet::{time_embeddings, ToyUNet};
use crate::error::{Error, Result};
use crate::rng::indexed;
use crate::tensor::Tensor;

/// Anything that predicts noise for a batch at a single step.
pub trait Denoiser: Sync {
    fn sample_shape(&self) -> [usize; 3];
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl Denoiser for ToyUNet {
    fn sample_shape(&self) -> [usize; 3] {
        ToyUNet::sample_shape(self)
    }

    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let emb = time_embeddings(&vec![t; x.shape()[0]], self.config.emb_dim)?;
        self.predict(x, &emb, None)
    }
}

/// One η = 0 step from `t` to `t_prev` (`t_prev = 0` lands on `x_0`).
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Contract(format!(
            "ddim_step needs t > t_prev, got t={t}, t_prev={t_prev}"
        )));
    }
    if t > schedule.total_steps() {
        return Err(Error::Contract(format!(
            "step {t} beyond schedule of {} steps",
            schedule.total_steps()
        )));
    }
    if x_t.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "ddim_step",
            detail: format!("{:?} vs {:?}", x_t.shape(), eps.shape()),
        });
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let (x, e) = (x as f64, e as f64);
            let x0 = (x - sb * e) / sa;
            (pa * x0 + pb * e) as f32
        })
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Initial noise for samples `first..first + count` of a seed, shape
/// `(count, c, h, w)`. Sample `i` depends only on `(seed, i)`.
pub fn initial_noise(shape: [usize; 3], seed: u64, first: usize, count: usize) -> Result<Tensor> {
    let rows = (first..first + count)
        .map(|i| {
            Tensor::randn(
                &[1, shape[0], shape[1], shape[2]],
                1.0,
                &mut indexed(seed, "x_T", i as u64),
            )
        })
        .collect::<Vec<_>>();
    Tensor::concat_rows(&rows)
}

/// Runs the sampler from `x_t` along `steps` (descending), returning every
/// state including the start and the final `x_0`.
pub fn run_trajectory<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    steps: &[usize],
    x_start: Tensor,
) -> Result<Vec<Tensor>> {
    let mut traj = Vec::with_capacity(steps.len() + 1);
    traj.push(x_start);
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let x = traj.last().unwrap();
        let eps = model.predict_eps(x, t)?;
        let next = ddim_step(x, &eps, t, t_prev, schedule)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Trajectories `[x_T, …, x_0]` for samples `first..first+count` of `seed`,
/// batched along the leading axis.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    num_steps: usize,
    seed: u64,
    first: usize,
    count: usize,
) -> Result<Vec<Tensor>> {
    let steps = sampling_steps(schedule.total_steps(), num_steps)?;
    let x_t = initial_noise(model.sample_shape(), seed, first, count)?;
    run_trajectory(model, schedule, &steps, x_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use crate::diffusion::unet::UNetConfig;
    use crate::rng::substream;

    #[test]
    fn zero_noise_with_flat_schedule_is_noop() {
        let s = make_schedule(4, 0.1, 0.1).unwrap();
        // ᾱ equal on both ends only when t == t_prev, which is rejected, so
        // check the identity on the formula with a schedule copy instead
        let mut flat = s.clone();
        flat.alpha_bars = vec![0.5; 4];
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let y = ddim_step(&x, &Tensor::zeros(&[3]), 3, 2, &flat).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-7);
        assert!(ddim_step(&x, &Tensor::zeros(&[3]), 3, 3, &s).is_err());
    }

    #[test]
    fn true_noise_recovers_x0() {
        let s = make_schedule(100, 1e-4, 0.05).unwrap();
        let mut rng = substream(0, "ddim");
        let x0 = Tensor::randn(&[64], 1.0, &mut rng);
        let eps = Tensor::randn(&[64], 1.0, &mut rng);
        for t in [1, 10, 50, 100] {
            let xt = s.corrupt(&x0, &eps, t);
            let rec = ddim_step(&xt, &eps, t, 0, &s).unwrap();
            assert!(rec.max_abs_diff(&x0) < 1e-5, "t={t}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_visits_all_steps() {
        let s = make_schedule(10, 1e-3, 0.1).unwrap();
        let model = ToyUNet::new(UNetConfig::default(), &mut substream(1, "init")).unwrap();
        let a = sample(&model, &s, 10, 5, 0, 2).unwrap();
        let b = sample(&model, &s, 10, 5, 0, 2).unwrap();
        assert_eq!(a.len(), 11);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        let second = sample(&model, &s, 10, 5, 1, 1).unwrap();
        assert!(second[0].bit_eq(&a[0].slice_rows(1, 2)));
    }
}
