use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSet;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::ToyUNet;
use crate::error::Result;
use crate::eval::ReferenceTrajectories;
use crate::finetune::stage::{run_stage, LogRow, Stage, StepEvent};
use crate::finetune::{attach_and_init, QuantConfig, QuantizedModel, TrainConfig};
use crate::par::Exec;

/// Trajectory MSE-to-teacher after each pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Same bit-widths with a single activation cluster and no finetuning.
    pub ptq: f64,
    pub taquant: f64,
    pub sla_te: f64,
    pub sla_a: f64,
    pub trainable_fraction: f64,
    pub log: Vec<LogRow>,
}

/// PTQ initialization, then the time-embedding stage, then the
/// attention-related stage, evaluating after each on `eval_samples`
/// trajectories of `num_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn quest_pipeline(
    teacher: &ToyUNet,
    calib: &CalibrationSet,
    schedule: &NoiseSchedule,
    qcfg: &QuantConfig,
    tcfg: &TrainConfig,
    num_steps: usize,
    eval_samples: usize,
    seed: u64,
    exec: Exec,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<(QuantizedModel, PipelineReport)> {
    let reference =
        ReferenceTrajectories::new(teacher, schedule, num_steps, seed, eval_samples, exec)?;
    let single = QuantConfig {
        num_clusters: 1,
        ..qcfg.clone()
    };
    let ptq = reference.mse(&attach_and_init(teacher, calib, &single)?, schedule, exec)?;

    let mut q = attach_and_init(teacher, calib, qcfg)?;
    let taquant = reference.mse(&q, schedule, exec)?;
    let mut log = run_stage(&mut q, calib, tcfg, Stage::TimeEmbed, seed, exec, observer)?;
    let sla_te = reference.mse(&q, schedule, exec)?;
    log.extend(run_stage(
        &mut q,
        calib,
        tcfg,
        Stage::Attention,
        seed,
        exec,
        observer,
    )?);
    let sla_a = reference.mse(&q, schedule, exec)?;
    let report = PipelineReport {
        ptq,
        taquant,
        sla_te,
        sla_a,
        trainable_fraction: q.trainable_fraction(),
        log,
    };
    Ok((q, report))
}
