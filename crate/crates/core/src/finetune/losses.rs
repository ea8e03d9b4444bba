//! Alignment and distillation losses and their gradients.
//!
//! Stage TE minimizes `Σ_{l∈C_TE} ‖Ō_l − Õ_l‖² + 2‖Ō − Õ‖²` over the
//! time-embedding weights and every activation scale of the current
//! cluster. Stage A minimizes `Σ_{l∈C_A} ‖Ō_l − Õ_l‖² + 2‖Ō − Õ‖²` over the
//! attention-related weights and the current cluster's scales except those
//! of the time-embedding layers. In stage A each alignment term reaches only
//! the weights of the layer that produces it; upstream weights see it only
//! through the distillation term.

use std::collections::BTreeSet;

use crate::autograd::{GradientMap, Graph, Var};
use crate::calibration::{CalibrationSet, StepRecord};
use crate::diffusion::unet::{act_scale_name, ForwardOpts};
use crate::error::Result;
use crate::finetune::{QuantizedModel, Stage};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Losses of one batch and the gradient of their sum.
#[derive(Clone, Debug)]
pub struct StepLosses {
    pub loss_align: f64,
    pub loss_task: f64,
    pub grads: GradientMap,
}

fn scale_names(q: &QuantizedModel, cluster: usize, exclude: &BTreeSet<String>) -> BTreeSet<String> {
    q.acts
        .iter()
        .filter(|(l, c, _)| *c == cluster && !exclude.contains(*l))
        .map(|(l, c, _)| act_scale_name(l, c))
        .collect()
}

/// Samples `rows` of a record tensor holding `n` samples; token-shaped
/// tensors carry several leading rows per sample.
fn rows_of(t: &Tensor, n: usize, rows: &[usize]) -> Tensor {
    let per = t.shape()[0] / n;
    if per == 1 {
        return t.gather_rows(rows);
    }
    let idx: Vec<usize> = rows.iter().flat_map(|&r| r * per..(r + 1) * per).collect();
    t.gather_rows(&idx)
}

struct Built {
    g: Graph,
    align: Var,
    task: Var,
    /// What backward runs on; differs from `align + task` in stage A.
    objective: Var,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

fn build(
    q: &QuantizedModel,
    rec: &StepRecord,
    t: usize,
    rows: &[usize],
    stage: Stage,
    task_on: bool,
) -> Result<Built> {
    let cluster = q.acts.cluster_of(t)?;
    let sel = &q.selection;
    let mut g = Graph::new();
    let n = rec.len();
    let x = rows_of(&rec.x_t, n, rows);
    let emb = rec.emb_batch(rows.len());
    let target_out = rows_of(&rec.teacher_out, n, rows);
    let none = BTreeSet::new();

    match stage {
        Stage::TimeEmbed => {
            let mut trainable = q.selected_params(&sel.time_embed);
            trainable.extend(scale_names(q, cluster, &none));
            let xv = g.constant(x);
            let ev = g.constant(emb);
            let out = q.model.forward(
                &mut g,
                xv,
                ev,
                &ForwardOpts {
                    quant: Some(q.view(t)),
                    trainable: Some(&trainable),
                },
            )?;
            let mut terms = Vec::new();
            for l in &sel.time_embed {
                let target = g.constant(rows_of(rec.act(l, t)?, n, rows));
                terms.push(g.mse(out.acts[l], target)?);
            }
            let align = sum_vars(&mut g, &terms)?;
            let tv = g.constant(target_out);
            let mse = g.mse(out.eps, tv)?;
            let task = g.scale(mse, 2.0);
            let objective = if task_on { g.add(align, task)? } else { align };
            Ok(Built {
                g,
                align,
                task,
                objective,
            })
        }
        Stage::Attention => {
            let scales = scale_names(q, cluster, &sel.time_embed);
            let weights = q.selected_params(&sel.attention);
            let view = Some(q.view(t));

            // distillation: selected weights and scales both trainable
            let full: BTreeSet<String> = scales.union(&weights).cloned().collect();
            let xv = g.constant(x.clone());
            let ev = g.constant(emb.clone());
            let out = q.model.forward(
                &mut g,
                xv,
                ev,
                &ForwardOpts {
                    quant: view,
                    trainable: Some(&full),
                },
            )?;
            let tv = g.constant(target_out);
            let mse = g.mse(out.eps, tv)?;
            let task = g.scale(mse, 2.0);

            // alignment through the quantized prefix: scales only
            let xv = g.constant(x);
            let ev = g.constant(emb);
            let probe = q.model.forward(
                &mut g,
                xv,
                ev,
                &ForwardOpts {
                    quant: view,
                    trainable: Some(&scales),
                },
            )?;
            let mut terms = Vec::new();
            let mut local = Vec::new();
            for l in &sel.attention {
                let target = rows_of(rec.act(l, t)?, n, rows);
                let tgt = g.constant(target.clone());
                terms.push(g.mse(probe.acts[l], tgt)?);
                // same term again with the layer's own weights trainable and
                // its input detached
                let detached = g.value(probe.inputs[l]).clone();
                let input = g.constant(detached);
                let own = q.selected_params(&BTreeSet::from([l.clone()]));
                let y = q.model.layer_forward(
                    &mut g,
                    l,
                    input,
                    &ForwardOpts {
                        quant: view,
                        trainable: Some(&own),
                    },
                )?;
                let tgt = g.constant(target);
                local.push(g.mse(y, tgt)?);
            }
            let align = sum_vars(&mut g, &terms)?;
            let local_sum = sum_vars(&mut g, &local)?;
            let align_grad = g.add(align, local_sum)?;
            let objective = if task_on {
                g.add(align_grad, task)?
            } else {
                align_grad
            };
            Ok(Built {
                g,
                align,
                task,
                objective,
            })
        }
    }
}

/// Rows handled by one worker.
const SHARD: usize = 8;

/// Losses and gradients for `rows` of the record at step `t`. Shards of the
/// batch run on separate tapes and are reduced in shard order, so the result
/// does not depend on `exec`.
pub fn stage_gradients(
    q: &QuantizedModel,
    calib: &CalibrationSet,
    t: usize,
    rows: &[usize],
    stage: Stage,
    task_on: bool,
    exec: Exec,
) -> Result<StepLosses> {
    let rec = calib.record(t)?;
    let shards: Vec<&[usize]> = rows.chunks(SHARD).collect();
    let parts = par::try_map(exec, &shards, |rows| -> Result<(f64, f64, GradientMap)> {
        let b = build(q, rec, t, rows, stage, task_on)?;
        let grads = b.g.backward(b.objective)?;
        Ok((
            b.g.value(b.align).item() as f64,
            b.g.value(b.task).item() as f64,
            grads,
        ))
    })?;
    let mut out = StepLosses {
        loss_align: 0.0,
        loss_task: 0.0,
        grads: GradientMap::default(),
    };
    for (shard, (a, tl, grads)) in shards.iter().zip(parts) {
        let w = shard.len() as f64 / rows.len() as f64;
        out.loss_align += w * a;
        out.loss_task += w * tl;
        out.grads.add_scaled(&grads, w as f32);
    }
    Ok(out)
}

fn all_rows(calib: &CalibrationSet, t: usize) -> Result<Vec<usize>> {
    Ok((0..calib.record(t)?.len()).collect())
}

fn value(q: &QuantizedModel, calib: &CalibrationSet, t: usize, stage: Stage) -> Result<(f64, f64)> {
    let rec = calib.record(t)?;
    let rows = all_rows(calib, t)?;
    let b = build(q, rec, t, &rows, stage, true)?;
    Ok((
        b.g.value(b.align).item() as f64,
        b.g.value(b.task).item() as f64,
    ))
}

/// Time-embedding alignment loss on every record at step `t`.
pub fn loss_te(q: &QuantizedModel, calib: &CalibrationSet, t: usize) -> Result<f64> {
    Ok(value(q, calib, t, Stage::TimeEmbed)?.0)
}

/// Attention-related alignment loss on every record at step `t`.
pub fn loss_a(q: &QuantizedModel, calib: &CalibrationSet, t: usize) -> Result<f64> {
    Ok(value(q, calib, t, Stage::Attention)?.0)
}

/// Twice the MSE between teacher and quantized outputs at step `t`.
pub fn task_loss(q: &QuantizedModel, calib: &CalibrationSet, t: usize) -> Result<f64> {
    Ok(value(q, calib, t, Stage::TimeEmbed)?.1)
}
