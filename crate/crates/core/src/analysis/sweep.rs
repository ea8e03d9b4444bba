use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSet;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::{LayerKind, Role, ToyUNet};
use crate::error::{Error, Result};
use crate::eval::ReferenceTrajectories;
use crate::finetune::{
    attach, run_stage, ActCalibration, QuantConfig, QuantPlan, Stage, TrainConfig,
};
use crate::par::Exec;
use crate::quant::Precision;

/// How degradation is measured: trajectory MSE-to-teacher over a fixed set
/// of initial noises.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub num_steps: usize,
    pub samples: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_steps: 20,
            samples: 64,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl EvalConfig {
    fn reference(
        &self,
        teacher: &ToyUNet,
        schedule: &NoiseSchedule,
    ) -> Result<ReferenceTrajectories> {
        ReferenceTrajectories::new(
            teacher,
            schedule,
            self.num_steps,
            self.seed,
            self.samples,
            self.exec,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub name: String,
    pub layers: BTreeSet<String>,
}

/// Feed-forward layers, the remaining linear layers, and all convolutions.
pub fn default_groups(model: &ToyUNet) -> Vec<LayerGroup> {
    let pick = |f: &dyn Fn(Role, &LayerKind) -> bool| -> BTreeSet<String> {
        model
            .layers()
            .iter()
            .filter(|l| f(l.role, &l.kind))
            .map(|l| l.id.clone())
            .collect()
    };
    vec![
        LayerGroup {
            name: "feed_forward".into(),
            layers: pick(&|r, _| r == Role::FeedForward),
        },
        LayerGroup {
            name: "other_linear".into(),
            layers: pick(&|r, k| r != Role::FeedForward && matches!(k, LayerKind::Linear { .. })),
        },
        LayerGroup {
            name: "conv".into(),
            layers: pick(&|_, k| matches!(k, LayerKind::Conv3x3 { .. })),
        },
    ]
}

fn check_partition(model: &ToyUNet, groups: &[LayerGroup]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for g in groups {
        for l in &g.layers {
            if model.layers().iter().all(|s| &s.id != l) {
                return Err(Error::Contract(format!(
                    "group `{}` names unknown layer `{l}`",
                    g.name
                )));
            }
            if !seen.insert(l.clone()) {
                return Err(Error::Contract(format!(
                    "layer `{l}` is in more than one group"
                )));
            }
        }
    }
    if seen.len() != model.layers().len() {
        return Err(Error::Contract("groups do not cover every layer".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Everything at 8 bits.
    pub baseline: f64,
    /// Group name, then bit-width, then degradation.
    pub groups: BTreeMap<String, BTreeMap<u32, f64>>,
}

impl SensitivityReport {
    pub fn degradation(&self, group: &str, bits: u32) -> Option<f64> {
        self.groups.get(group)?.get(&bits).copied()
    }

    /// Groups ordered by degradation at `bits`, worst first.
    pub fn ranking(&self, bits: u32) -> Vec<(String, f64)> {
        let mut r: Vec<(String, f64)> = self
            .groups
            .iter()
            .filter_map(|(g, m)| m.get(&bits).map(|&d| (g.clone(), d)))
            .collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1));
        r
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "bits", "degradation"])?;
        for (g, m) in &self.groups {
            for (b, d) in m {
                w.write_record([g.clone(), b.to_string(), format!("{d:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// For each group and bit-width, quantizes that group's activations to the
/// given bits with everything else at 8 bits, and measures degradation.
pub fn sensitivity_sweep(
    teacher: &ToyUNet,
    calib: &CalibrationSet,
    schedule: &NoiseSchedule,
    groups: &[LayerGroup],
    bits_list: &[u32],
    qcfg: &QuantConfig,
    eval: &EvalConfig,
) -> Result<SensitivityReport> {
    check_partition(teacher, groups)?;
    let reference = eval.reference(teacher, schedule)?;
    let base_cfg = QuantConfig {
        bits_w: 8,
        bits_a: 8,
        ..qcfg.clone()
    };
    let base_plan = QuantPlan::uniform(teacher, &base_cfg)?;
    let baseline = reference.mse(&attach(teacher, calib, &base_plan)?, schedule, eval.exec)?;
    let mut out = BTreeMap::new();
    for g in groups {
        let mut per_bits = BTreeMap::new();
        for &bits in bits_list {
            let act = Precision::from_bits(bits)?;
            let plan = base_plan.clone().update(&g.layers, |p| p.act = act);
            let d = if bits == 8 {
                baseline
            } else {
                reference.mse(&attach(teacher, calib, &plan)?, schedule, eval.exec)?
            };
            per_bits.insert(bits, d);
        }
        out.insert(g.name.clone(), per_bits);
    }
    Ok(SensitivityReport {
        baseline,
        groups: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeAblationReport {
    pub bits_w: u32,
    pub bits_a: u32,
    /// Time-embedding activations quantized with one set for all steps.
    pub quantized_te: f64,
    /// Time-embedding weights and activations at full precision.
    pub fp_te: f64,
    /// Time-aware time-embedding quantizers plus the time-embedding stage.
    pub taquant_sla_te: f64,
}

impl TeAblationReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "mse"])?;
        for (run, v) in [
            ("quantized_te", self.quantized_te),
            ("fp_te", self.fp_te),
            ("taquant_sla_te", self.taquant_sla_te),
        ] {
            w.write_record([run.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Three runs that differ only in how the time-embedding layers are
/// treated; every other layer uses time-aware quantizers at `qcfg` bits.
pub fn te_ablation(
    teacher: &ToyUNet,
    calib: &CalibrationSet,
    schedule: &NoiseSchedule,
    qcfg: &QuantConfig,
    tcfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<TeAblationReport> {
    let reference = eval.reference(teacher, schedule)?;
    let te = teacher.selection().time_embed;
    let plan = QuantPlan::uniform(teacher, qcfg)?;

    let naive = plan
        .clone()
        .update(&te, |p| p.calibration = ActCalibration::Pooled);
    let quantized_te = reference.mse(&attach(teacher, calib, &naive)?, schedule, eval.exec)?;

    let fp = plan.clone().update(&te, |p| {
        p.weight = Precision::PassThrough;
        p.act = Precision::PassThrough;
    });
    let fp_te = reference.mse(&attach(teacher, calib, &fp)?, schedule, eval.exec)?;

    let mut q = attach(teacher, calib, &plan)?;
    run_stage(
        &mut q,
        calib,
        tcfg,
        Stage::TimeEmbed,
        eval.seed,
        eval.exec,
        &mut |_| {},
    )?;
    let taquant_sla_te = reference.mse(&q, schedule, eval.exec)?;

    Ok(TeAblationReport {
        bits_w: qcfg.bits_w,
        bits_a: qcfg.bits_a,
        quantized_te,
        fp_te,
        taquant_sla_te,
    })
}
