//! Quantized model construction (PTQ initialization) and the selective
//! two-stage finetuning pipeline.

mod losses;
mod pipeline;
mod stage;

pub use losses::{loss_a, loss_te, stage_gradients, task_loss, StepLosses};
pub use pipeline::{quest_pipeline, PipelineReport};
pub use stage::{parse_scale_name, run_stage, LogRow, Stage, StepEvent};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSet;
use crate::diffusion::sampler::Denoiser;
use crate::diffusion::unet::{time_embeddings, LayerSelection, QuantView, ToyUNet};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::params::AdamConfig;
use crate::quant::{
    build_cluster_map, init_mse_search, FakeQuantizer, Precision, TimeAwareQuantizerSet,
    WeightQuantizer,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Weight bit-width, or 32 for full precision.
    pub bits_w: u32,
    /// Activation bit-width, or 32 for full precision.
    pub bits_a: u32,
    pub num_clusters: usize,
    /// Clip-ratio grid of the MSE search.
    pub grid: usize,
    /// One weight grid per leading-axis slice instead of per tensor.
    pub per_channel: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits_w: 4,
            bits_a: 4,
            num_clusters: 20,
            grid: 80,
            per_channel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub lr_weights: f64,
    pub lr_scales: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    /// Adds the distillation term on the final output to each stage.
    pub task_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 20,
            lr_weights: 1e-5,
            lr_scales: 1e-4,
            batch_size: 32,
            adam: AdamConfig::default(),
            grad_clip: 1.0,
            task_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_weights > 0.0 && self.lr_scales > 0.0)
            || self.batch_size == 0
            || !(self.grad_clip > 0.0)
        {
            return Err(Error::Contract(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// How a layer's activation quantizers are calibrated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActCalibration {
    /// One parameter set per cluster, fit on that cluster's steps.
    TimeAware,
    /// One parameter set fit on all steps, copied into every cluster.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub weight: Precision,
    pub act: Precision,
    pub calibration: ActCalibration,
}

/// Per-layer quantization choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub num_clusters: usize,
    pub grid: usize,
    pub per_channel: bool,
    pub layers: BTreeMap<String, LayerPlan>,
}

impl QuantPlan {
    /// Same precision everywhere; time-aware unless there is one cluster.
    pub fn uniform(model: &ToyUNet, cfg: &QuantConfig) -> Result<Self> {
        let plan = LayerPlan {
            weight: Precision::from_bits(cfg.bits_w)?,
            act: Precision::from_bits(cfg.bits_a)?,
            calibration: ActCalibration::TimeAware,
        };
        Ok(Self {
            num_clusters: cfg.num_clusters,
            grid: cfg.grid,
            per_channel: cfg.per_channel,
            layers: model
                .layers()
                .iter()
                .map(|l| (l.id.clone(), plan))
                .collect(),
        })
    }

    /// Applies `f` to the plans of `ids`.
    pub fn update<'a>(
        mut self,
        ids: impl IntoIterator<Item = &'a String>,
        f: impl Fn(&mut LayerPlan),
    ) -> Self {
        for id in ids {
            if let Some(p) = self.layers.get_mut(id) {
                f(p);
            }
        }
        self
    }
}

/// A copy of the teacher with frozen weight quantizers, time-aware
/// activation quantizers and a record of which layers may train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub model: ToyUNet,
    pub weights: BTreeMap<String, WeightQuantizer>,
    pub acts: TimeAwareQuantizerSet,
    pub selection: LayerSelection,
    pub plan: QuantPlan,
}

impl QuantizedModel {
    pub fn view(&self, t: usize) -> QuantView<'_> {
        QuantView {
            weights: &self.weights,
            acts: &self.acts,
            t,
        }
    }

    /// Names of the weight and bias tensors of the selected layers.
    pub fn selected_params(&self, layers: &BTreeSet<String>) -> BTreeSet<String> {
        self.model
            .layers()
            .iter()
            .filter(|l| layers.contains(&l.id))
            .flat_map(|l| [l.weight_name(), l.bias_name()])
            .collect()
    }

    /// Fraction of model parameters (by count) that finetuning may change.
    pub fn trainable_fraction(&self) -> f64 {
        let all: BTreeSet<String> = self
            .selection
            .time_embed
            .union(&self.selection.attention)
            .cloned()
            .collect();
        let n: usize = self
            .selected_params(&all)
            .iter()
            .map(|name| self.model.params.get(name).unwrap().len())
            .sum();
        n as f64 / self.model.params.num_values() as f64
    }

    /// Quantized forward on `x` at step `t`, also returning every layer's
    /// output before activation quantization.
    pub fn predict_with_activations(
        &self,
        x: &Tensor,
        t: usize,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
        let emb = time_embeddings(&vec![t; x.shape()[0]], self.model.config.emb_dim)?;
        self.model
            .predict_with_activations(x, &emb, Some(self.view(t)))
    }
}

impl Denoiser for QuantizedModel {
    fn sample_shape(&self) -> [usize; 3] {
        self.model.sample_shape()
    }

    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let emb = time_embeddings(&vec![t; x.shape()[0]], self.model.config.emb_dim)?;
        self.model.predict(x, &emb, Some(self.view(t)))
    }
}

/// Largest number of values any single quantizer is fit on.
const MAX_FIT_VALUES: usize = 65536;

/// Evenly strided subsample of at most `max` values.
fn subsample(values: &[f32], max: usize) -> Vec<f32> {
    if values.len() <= max {
        return values.to_vec();
    }
    let stride = values.len().div_ceil(max);
    values.iter().step_by(stride).copied().collect()
}

fn init_weight_quantizer(
    w: &Tensor,
    bits: u8,
    grid: usize,
    per_channel: bool,
) -> Result<WeightQuantizer> {
    if per_channel {
        let rows = w.shape()[0];
        let row = w.len() / rows;
        let per = w
            .data()
            .chunks(row)
            .map(|c| init_mse_search(c, bits, true, grid).map(FakeQuantizer::frozen))
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightQuantizer::PerChannel(per))
    } else {
        Ok(WeightQuantizer::PerTensor(FakeQuantizer::frozen(
            init_mse_search(w.data(), bits, true, grid)?,
        )))
    }
}

/// Teacher activations of every layer at each calibration step, subsampled.
fn replay_activations(
    teacher: &ToyUNet,
    calib: &CalibrationSet,
) -> Result<BTreeMap<(String, usize), Vec<f32>>> {
    let steps = calib.sampled_steps();
    let per_step = par::try_map(Exec::Parallel, &steps, |&t| {
        let rec = calib.record(t)?;
        let (_, _, pre) =
            teacher.predict_with_activations(&rec.x_t, &rec.emb_batch(rec.len()), None)?;
        Ok::<_, Error>(
            pre.into_iter()
                .map(|(l, a)| (l, subsample(a.data(), MAX_FIT_VALUES / 4)))
                .collect::<Vec<_>>(),
        )
    })?;
    let mut out = BTreeMap::new();
    for (&t, layers) in steps.iter().zip(per_step) {
        for (l, v) in layers {
            out.insert((l, t), v);
        }
    }
    Ok(out)
}

/// Builds the PTQ model described by `plan`: weight quantizers fit by MSE
/// search on the teacher weights and frozen, activation quantizers fit on
/// teacher activations replayed from the calibration inputs.
pub fn attach(
    teacher: &ToyUNet,
    calib: &CalibrationSet,
    plan: &QuantPlan,
) -> Result<QuantizedModel> {
    let mut acts = build_cluster_map(calib.total_steps, plan.num_clusters)?;
    calib.check_covers(acts.map())?;
    let mut weights = BTreeMap::new();
    for spec in teacher.layers() {
        let lp = plan
            .layers
            .get(&spec.id)
            .ok_or_else(|| Error::Contract(format!("plan lacks layer `{}`", spec.id)))?;
        if let Precision::Bits(b) = lp.weight {
            let w = teacher.params.get(&spec.weight_name()).unwrap();
            weights.insert(
                spec.id.clone(),
                init_weight_quantizer(w, b, plan.grid, plan.per_channel)?,
            );
        }
    }

    let needs_acts = plan
        .layers
        .values()
        .any(|p| matches!(p.act, Precision::Bits(_)));
    let replay = if needs_acts {
        replay_activations(teacher, calib)?
    } else {
        BTreeMap::new()
    };
    let map = acts.map().clone();
    for spec in teacher.layers() {
        let lp = plan.layers[&spec.id];
        let Precision::Bits(bits) = lp.act else {
            continue;
        };
        let gather = |steps: &[usize]| -> Vec<f32> {
            let all: Vec<f32> = steps
                .iter()
                .flat_map(|&t| replay[&(spec.id.clone(), t)].iter().copied())
                .collect();
            subsample(&all, MAX_FIT_VALUES)
        };
        match lp.calibration {
            ActCalibration::Pooled => {
                let p = init_mse_search(&gather(&calib.sampled_steps()), bits, false, plan.grid)?;
                for c in 0..map.num_clusters() {
                    acts.insert(&spec.id, c, p)?;
                }
            }
            ActCalibration::TimeAware => {
                for c in 0..map.num_clusters() {
                    let steps = calib.steps_in_cluster(&map, c);
                    let p = init_mse_search(&gather(&steps), bits, false, plan.grid)?;
                    acts.insert(&spec.id, c, p)?;
                }
            }
        }
    }
    acts.check_total()?;
    Ok(QuantizedModel {
        model: teacher.clone(),
        weights,
        acts,
        selection: teacher.selection(),
        plan: plan.clone(),
    })
}

/// [`attach`] with the same precision for every layer.
pub fn attach_and_init(
    teacher: &ToyUNet,
    calib: &CalibrationSet,
    cfg: &QuantConfig,
) -> Result<QuantizedModel> {
    attach(teacher, calib, &QuantPlan::uniform(teacher, cfg)?)
}
