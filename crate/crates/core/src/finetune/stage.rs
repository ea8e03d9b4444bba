use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::GradientMap;
use crate::calibration::CalibrationSet;
use crate::error::{Error, Result};
use crate::finetune::losses::stage_gradients;
use crate::finetune::{QuantizedModel, TrainConfig};
use crate::par::Exec;
use crate::params::Adam;
use crate::quant::SCALE_FLOOR;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Time-embedding layers.
    #[serde(rename = "TE")]
    TimeEmbed,
    /// Attention-related layers.
    #[serde(rename = "A")]
    Attention,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::TimeEmbed => "TE",
            Stage::Attention => "A",
        })
    }
}

/// Passed to the observer after each gradient computation, before clipping
/// and the update.
pub struct StepEvent<'a> {
    pub stage: Stage,
    pub t: usize,
    pub cluster: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss_align: f64,
    pub loss_task: f64,
    pub grads: &'a GradientMap,
}

/// Mean losses of one (stage, step, epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub loss_align: f64,
    pub loss_task: f64,
}

impl LogRow {
    pub fn write_csv<W: Write>(rows: &[LogRow], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "step", "epoch", "loss_align", "loss_task"])?;
        for r in rows {
            w.write_record([
                r.stage.to_string(),
                r.step.to_string(),
                r.epoch.to_string(),
                format!("{:e}", r.loss_align),
                format!("{:e}", r.loss_task),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Finds the first layer whose quantized activations are non-finite on the
/// failing batch, for the error report.
fn worst_layer(q: &QuantizedModel, calib: &CalibrationSet, t: usize, rows: &[usize]) -> String {
    let Ok(rec) = calib.record(t) else {
        return "<unknown>".into();
    };
    let x = rec.x_t.gather_rows(rows);
    match q.predict_with_activations(&x, t) {
        Ok((_, acts, _)) => q
            .model
            .layers()
            .iter()
            .find(|l| acts.get(&l.id).is_some_and(|a| !a.all_finite()))
            .map(|l| l.id.clone())
            .unwrap_or_else(|| "<loss>".into()),
        Err(e) => format!("<forward failed: {e}>"),
    }
}

/// Runs one finetuning stage in place and returns its loss log.
pub fn run_stage(
    q: &mut QuantizedModel,
    calib: &CalibrationSet,
    cfg: &TrainConfig,
    stage: Stage,
    seed: u64,
    exec: Exec,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    calib.check_covers(q.acts.map())?;
    let mut rng = substream(seed, &format!("finetune/{stage}"));
    let mut adam = Adam::new(cfg.adam);
    let mut steps = calib.sampled_steps();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs_per_stage {
        steps.shuffle(&mut rng);
        for &t in &steps {
            let cluster = q.acts.cluster_of(t)?;
            let mut rows: Vec<usize> = (0..calib.record(t)?.len()).collect();
            rows.shuffle(&mut rng);
            let (mut sum_align, mut sum_task, mut n) = (0.0, 0.0, 0);
            for (batch, chunk) in rows.chunks(cfg.batch_size).enumerate() {
                let mut step = stage_gradients(q, calib, t, chunk, stage, cfg.task_loss, exec)?;
                if !(step.loss_align.is_finite() && step.loss_task.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        stage: stage.to_string(),
                        step: t,
                        batch,
                        layer: worst_layer(q, calib, t, chunk),
                    });
                }
                observer(&StepEvent {
                    stage,
                    t,
                    cluster,
                    epoch,
                    batch,
                    loss_align: step.loss_align,
                    loss_task: step.loss_task,
                    grads: &step.grads,
                });
                step.grads.clip_global_norm(cfg.grad_clip);
                apply_update(q, &mut adam, cfg, &step.grads)?;
                sum_align += step.loss_align;
                sum_task += step.loss_task;
                n += 1;
            }
            log.push(LogRow {
                stage,
                step: t,
                epoch,
                loss_align: sum_align / n as f64,
                loss_task: sum_task / n as f64,
            });
        }
    }
    Ok(log)
}

/// Parses `act/{layer}/{cluster}`.
pub fn parse_scale_name(name: &str) -> Option<(&str, usize)> {
    let rest = name.strip_prefix("act/")?;
    let (layer, cluster) = rest.rsplit_once('/')?;
    Some((layer, cluster.parse().ok()?))
}

fn apply_update(
    q: &mut QuantizedModel,
    adam: &mut Adam,
    cfg: &TrainConfig,
    grads: &GradientMap,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if let Some((layer, cluster)) = parse_scale_name(name) {
            let p = q.acts.get_mut(layer, cluster)?;
            let mut s = [p.scale];
            adam.update(name, cfg.lr_scales, &mut s, g.data());
            p.scale = s[0].max(SCALE_FLOOR);
        } else {
            let layer = name.rsplit_once('.').map(|(l, _)| l).unwrap_or(name);
            if !q.selection.contains(layer) {
                return Err(Error::Contract(format!(
                    "gradient for non-selected parameter `{name}`"
                )));
            }
            let p = q
                .model
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            adam.update(name, cfg.lr_weights, p.data_mut(), g.data());
        }
    }
    Ok(())
}
