//! Data-free calibration: teacher trajectories from seeded Gaussian noise,
//! recorded at the uniformly sampled steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::binfmt::{Reader, Writer};
use crate::diffusion::sampler::{initial_noise, run_trajectory};
use crate::diffusion::schedule::{sampling_steps, NoiseSchedule};
use crate::diffusion::unet::{time_embedding, time_embeddings, ToyUNet};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::quant::ClusterMap;
use crate::rng::substream_seed;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QCAL";
pub const QCAL_VERSION: u16 = 1;

/// Everything recorded at one sampled step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Trajectory states entering step `t`, shape `(N, c, h, w)`.
    pub x_t: Tensor,
    /// `e(t)`, shape `(1, d_e)`.
    pub emb: Tensor,
    /// Teacher noise prediction on `x_t`.
    pub teacher_out: Tensor,
    /// Teacher outputs of the selected layers, one row block per sample.
    pub acts: BTreeMap<String, Tensor>,
}

impl StepRecord {
    pub fn len(&self) -> usize {
        self.x_t.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn act(&self, layer: &str, t: usize) -> Result<&Tensor> {
        self.acts
            .get(layer)
            .ok_or_else(|| Error::MissingActivation {
                layer: layer.to_string(),
                step: t,
            })
    }

    /// Embeddings repeated for a batch of `n`.
    pub fn emb_batch(&self, n: usize) -> Tensor {
        Tensor::concat_rows(&vec![self.emb.clone(); n]).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub total_steps: usize,
    pub num_per_step: usize,
    pub seed: u64,
    pub records: BTreeMap<usize, StepRecord>,
}

impl CalibrationSet {
    /// Sampled steps, ascending.
    pub fn sampled_steps(&self) -> Vec<usize> {
        self.records.keys().copied().collect()
    }

    pub fn record(&self, t: usize) -> Result<&StepRecord> {
        self.records
            .get(&t)
            .ok_or_else(|| Error::MissingActivation {
                layer: "<inputs>".into(),
                step: t,
            })
    }

    /// Sampled steps that fall into `cluster` of `map`.
    pub fn steps_in_cluster(&self, map: &ClusterMap, cluster: usize) -> Vec<usize> {
        self.records
            .keys()
            .copied()
            .filter(|&t| map.cluster_of(t).ok() == Some(cluster))
            .collect()
    }

    /// Errors with the first cluster of `map` that has no sampled step.
    pub fn check_covers(&self, map: &ClusterMap) -> Result<()> {
        if map.total_steps() != self.total_steps {
            return Err(Error::Contract(format!(
                "calibration covers T={} but the quantizer map has T={}",
                self.total_steps,
                map.total_steps()
            )));
        }
        for c in 0..map.num_clusters() {
            if self.steps_in_cluster(map, c).is_empty() {
                return Err(Error::MissingCluster(c));
            }
        }
        Ok(())
    }
}

/// Chunk of trajectories handled by one worker.
const CHUNK: usize = 16;

/// Runs `num_per_step` teacher trajectories and records the states at each
/// of `sampled_steps`. Trajectories follow the `num_sampling_steps`
/// sub-schedule when it visits every sampled step, the full schedule
/// otherwise.
pub fn generate_calibration(
    teacher: &ToyUNet,
    schedule: &NoiseSchedule,
    num_per_step: usize,
    sampled_steps: &[usize],
    num_sampling_steps: usize,
    seed: u64,
    exec: Exec,
) -> Result<CalibrationSet> {
    let total = schedule.total_steps();
    if num_per_step == 0 {
        return Err(Error::Empty("calibration samples per step"));
    }
    if sampled_steps.is_empty() {
        return Err(Error::Empty("sampled steps"));
    }
    if let Some(&bad) = sampled_steps.iter().find(|&&t| t == 0 || t > total) {
        return Err(Error::Contract(format!(
            "sampled step {bad} outside [1, {total}]"
        )));
    }
    let wanted: BTreeSet<usize> = sampled_steps.iter().copied().collect();
    let sub = sampling_steps(total, num_sampling_steps)?;
    let path = if wanted.iter().all(|t| sub.contains(t)) {
        sub
    } else {
        (1..=total).rev().collect()
    };

    let traj_seed = substream_seed(seed, "calibration");
    let chunks: Vec<(usize, usize)> = (0..num_per_step)
        .step_by(CHUNK)
        .map(|a| (a, (a + CHUNK).min(num_per_step)))
        .collect();
    let states = par::try_map(
        exec,
        &chunks,
        |&(a, b)| -> Result<BTreeMap<usize, Tensor>> {
            let x_t = initial_noise(teacher.sample_shape(), traj_seed, a, b - a)?;
            let traj = run_trajectory(teacher, schedule, &path, x_t)?;
            Ok(path
                .iter()
                .zip(&traj)
                .filter(|(t, _)| wanted.contains(t))
                .map(|(&t, x)| (t, x.clone()))
                .collect())
        },
    )?;

    let sel = teacher.selection();
    let layers: BTreeSet<String> = sel.time_embed.union(&sel.attention).cloned().collect();
    let mut records = BTreeMap::new();
    for &t in &wanted {
        let parts: Vec<Tensor> = states.iter().map(|m| m[&t].clone()).collect();
        let x_t = Tensor::concat_rows(&parts)?;
        let outs = par::try_map(exec, &chunks, |&(a, b)| {
            let emb = time_embeddings(&vec![t; b - a], teacher.config.emb_dim)?;
            teacher.predict_with_activations(&x_t.slice_rows(a, b), &emb, None)
        })?;
        let teacher_out =
            Tensor::concat_rows(&outs.iter().map(|o| o.0.clone()).collect::<Vec<_>>())?;
        let mut acts = BTreeMap::new();
        for l in &layers {
            let rows: Vec<Tensor> = outs.iter().map(|o| o.1[l].clone()).collect();
            acts.insert(l.clone(), Tensor::concat_rows(&rows)?);
        }
        let emb = time_embedding(t, teacher.config.emb_dim)?;
        records.insert(
            t,
            StepRecord {
                x_t,
                emb,
                teacher_out,
                acts,
            },
        );
    }
    Ok(CalibrationSet {
        total_steps: total,
        num_per_step,
        seed,
        records,
    })
}

pub fn write_calibration<W: std::io::Write>(set: &CalibrationSet, out: W) -> Result<W> {
    let mut w = Writer::new(out, MAGIC, QCAL_VERSION)?;
    w.u32(set.total_steps as u32)?;
    w.u32(set.num_per_step as u32)?;
    w.u64(set.seed)?;
    let count: usize = set.records.values().map(|r| 3 + r.acts.len()).sum();
    w.u32(count as u32)?;
    for (&t, r) in &set.records {
        let named = [
            ("x_t", &r.x_t),
            ("emb", &r.emb),
            ("teacher_out", &r.teacher_out),
        ];
        for (name, tensor) in named
            .into_iter()
            .chain(r.acts.iter().map(|(l, a)| (l.as_str(), a)))
        {
            w.u32(t as u32)?;
            w.str(name)?;
            w.tensor(tensor)?;
        }
    }
    w.finish()
}

pub fn read_calibration<R: std::io::Read>(input: R) -> Result<CalibrationSet> {
    let mut r = Reader::new(input, MAGIC, QCAL_VERSION)?;
    let total_steps = r.u32()? as usize;
    let num_per_step = r.u32()? as usize;
    let seed = r.u64()?;
    let count = r.u32()?;
    let mut parts: BTreeMap<usize, BTreeMap<String, Tensor>> = BTreeMap::new();
    for _ in 0..count {
        let t = r.u32()? as usize;
        let name = r.str()?;
        let tensor = r.tensor()?;
        parts.entry(t).or_default().insert(name, tensor);
    }
    r.expect_end()?;
    let mut records = BTreeMap::new();
    for (t, mut named) in parts {
        let mut take = |k: &str| {
            named
                .remove(k)
                .ok_or_else(|| Error::Format(format!("step {t} lacks `{k}`")))
        };
        let (x_t, emb, teacher_out) = (take("x_t")?, take("emb")?, take("teacher_out")?);
        if x_t.shape()[0] != num_per_step {
            return Err(Error::Format(format!(
                "step {t} holds {} samples, header says {num_per_step}",
                x_t.shape()[0]
            )));
        }
        records.insert(
            t,
            StepRecord {
                x_t,
                emb,
                teacher_out,
                acts: named,
            },
        );
    }
    Ok(CalibrationSet {
        total_steps,
        num_per_step,
        seed,
        records,
    })
}

pub fn save_calibration(set: &CalibrationSet, path: &Path) -> Result<()> {
    write_calibration(set, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_calibration(path: &Path) -> Result<CalibrationSet> {
    read_calibration(BufReader::new(File::open(path)?))
}
