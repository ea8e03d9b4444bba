//! Full-precision teacher training with the ε-prediction objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradientMap, Graph};
use crate::diffusion::data::Dataset;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::{time_embeddings, ForwardOpts, ToyUNet, UNetConfig};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::params::{Adam, AdamConfig};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Epochs always run before convergence is checked.
    pub epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Held-out ε-prediction MSE that counts as converged.
    pub threshold: f64,
    /// Decay of the weight average that becomes the returned model.
    pub ema_decay: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            max_epochs: 60,
            batch_size: 32,
            lr: 3e-3,
            grad_clip: 1.0,
            threshold: 0.05,
            ema_decay: 0.995,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub heldout_loss: f64,
}

/// A fixed set of corrupted inputs with their noise and steps.
pub struct Corruptions {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub eps: Tensor,
    pub steps: Vec<usize>,
}

/// Corrupts each image of `x0` at an independently drawn step.
pub fn corrupt_batch<R: Rng + ?Sized>(
    x0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Corruptions {
    let n = x0.shape()[0];
    let steps: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=schedule.total_steps()))
        .collect();
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    let rows: Vec<Tensor> = (0..n)
        .map(|i| {
            schedule.corrupt(
                &x0.slice_rows(i, i + 1),
                &eps.slice_rows(i, i + 1),
                steps[i],
            )
        })
        .collect();
    let x_t = Tensor::concat_rows(&rows).unwrap();
    Corruptions {
        x0: x0.clone(),
        x_t,
        eps,
        steps,
    }
}

const SHARD: usize = 8;

/// Loss and gradient of the ε-prediction MSE over a batch, sharded across
/// workers and reduced in shard order.
fn batch_gradients(model: &ToyUNet, c: &Corruptions, exec: Exec) -> Result<(f64, GradientMap)> {
    let n = c.x_t.shape()[0];
    let shards: Vec<(usize, usize)> = (0..n)
        .step_by(SHARD)
        .map(|s| (s, (s + SHARD).min(n)))
        .collect();
    let trainable = model.params.names().cloned().collect();
    let parts = par::try_map(exec, &shards, |&(a, b)| -> Result<(f64, GradientMap)> {
        let mut g = Graph::new();
        let x = g.constant(c.x_t.slice_rows(a, b));
        let e = g.constant(time_embeddings(&c.steps[a..b], model.config.emb_dim)?);
        let target = g.constant(c.eps.slice_rows(a, b));
        let out = model.forward(
            &mut g,
            x,
            e,
            &ForwardOpts {
                quant: None,
                trainable: Some(&trainable),
            },
        )?;
        let loss = g.mse(out.eps, target)?;
        Ok((g.value(loss).item() as f64, g.backward(loss)?))
    })?;
    let mut total = GradientMap::default();
    let mut loss = 0.0;
    for ((a, b), (l, grads)) in shards.iter().zip(parts) {
        let w = (b - a) as f64 / n as f64;
        loss += w * l;
        total.add_scaled(&grads, w as f32);
    }
    Ok((loss, total))
}

/// Mean ε-prediction MSE of `model` on fixed corruptions.
pub fn denoising_loss(model: &ToyUNet, c: &Corruptions) -> Result<f64> {
    let emb = time_embeddings(&c.steps, model.config.emb_dim)?;
    Ok(model.predict(&c.x_t, &emb, None)?.mse(&c.eps))
}

/// Fraction of corruptions where one denoising step, `x̂₀` from the predicted
/// noise, is closer to `x₀` than the corrupted input is.
pub fn one_step_improvement(
    model: &ToyUNet,
    schedule: &NoiseSchedule,
    c: &Corruptions,
) -> Result<f64> {
    let emb = time_embeddings(&c.steps, model.config.emb_dim)?;
    let eps = model.predict(&c.x_t, &emb, None)?;
    let n = c.steps.len();
    let mut better = 0;
    for i in 0..n {
        let ab = schedule.alpha_bar(c.steps[i]);
        let (xt, e, x0) = (
            c.x_t.slice_rows(i, i + 1),
            eps.slice_rows(i, i + 1),
            c.x0.slice_rows(i, i + 1),
        );
        let data = xt
            .data()
            .iter()
            .zip(e.data())
            .map(|(&x, &e)| ((x as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt()) as f32)
            .collect();
        let x0_hat = Tensor::new(xt.shape(), data)?;
        if x0_hat.mse(&x0) < xt.mse(&x0) {
            better += 1;
        }
    }
    Ok(better as f64 / n as f64)
}

/// The held-out split (last tenth, or everything for tiny sets) with its
/// fixed corruptions.
pub fn heldout_corruptions(dataset: &Dataset, schedule: &NoiseSchedule, seed: u64) -> Corruptions {
    let n = dataset.len();
    let held = if n >= 10 { n / 10 } else { 0 };
    let x0 = if held > 0 {
        dataset.images.slice_rows(n - held, n)
    } else {
        dataset.images.clone()
    };
    corrupt_batch(&x0, schedule, &mut substream(seed, "teacher/heldout"))
}

/// Cosine decay from `lr` to `lr / 20` over the first `epochs`, flat after.
fn cosine_lr(lr: f64, epoch: usize, epochs: usize) -> f64 {
    let floor = lr / 20.0;
    if epochs <= 1 {
        return lr;
    }
    if epoch >= epochs {
        return floor;
    }
    let p = epoch as f64 / (epochs - 1) as f64;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Trains a teacher on `dataset` (last tenth held out). Fails with
/// [`Error::NonConvergence`] if the held-out loss is still above the
/// threshold after `max_epochs`.
pub fn train_teacher(
    dataset: &Dataset,
    arch: UNetConfig,
    schedule: &NoiseSchedule,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<(ToyUNet, TeacherReport)> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs < cfg.epochs {
        return Err(Error::Contract(format!("invalid teacher config {cfg:?}")));
    }
    let train_n = if n >= 10 { n - n / 10 } else { n };
    let heldout = heldout_corruptions(dataset, schedule, seed);

    let mut model = ToyUNet::new(arch, &mut substream(seed, "teacher/init"))?;
    let mut rng = substream(seed, "teacher");
    let mut ema = model.clone();
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..train_n).collect();
    let mut epoch_losses = Vec::new();
    let mut heldout_loss = f64::INFINITY;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x0 = dataset.images.gather_rows(chunk);
            let c = corrupt_batch(&x0, schedule, &mut rng);
            let (loss, mut grads) = batch_gradients(&model, &c, cfg.exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "teacher".into(),
                    step: 0,
                    batch: batches,
                    layer: String::new(),
                });
            }
            grads.clip_global_norm(cfg.grad_clip);
            for (name, g) in grads.iter() {
                let p = model
                    .params
                    .get_mut(name)
                    .expect("gradient for unknown parameter");
                adam.update(name, lr, p.data_mut(), g.data());
            }
            let d = cfg.ema_decay as f32;
            for (name, p) in model.params.iter() {
                let e = ema.params.get_mut(name).unwrap();
                e.data_mut()
                    .iter_mut()
                    .zip(p.data())
                    .for_each(|(e, &v)| *e = d * *e + (1.0 - d) * v);
            }
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        if epoch + 1 >= cfg.epochs {
            heldout_loss = denoising_loss(&ema, &heldout)?;
            if heldout_loss <= cfg.threshold {
                let report = TeacherReport {
                    epochs_run: epoch + 1,
                    epoch_losses,
                    heldout_loss,
                };
                return Ok((ema, report));
            }
        }
    }
    Err(Error::NonConvergence {
        loss: heldout_loss,
        epochs: cfg.max_epochs,
        threshold: cfg.threshold,
    })
}
