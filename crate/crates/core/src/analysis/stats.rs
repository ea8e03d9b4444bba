use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSet;
use crate::error::{Error, Result};
use crate::finetune::QuantizedModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// `(bin_left, bin_right, count)` over `[min, max]`.
    pub histogram: Vec<(f64, f64, u64)>,
    /// Fraction of values within `window` standard deviations of the mean.
    pub central_mass: f64,
    pub window: f64,
}

impl LayerStats {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Summary of one set of values.
pub fn stats_of(values: &[f32], bins: usize, window: f64) -> Result<LayerStats> {
    if values.is_empty() {
        return Err(Error::Empty("activation record"));
    }
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    let n = values.len() as f64;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut sum = 0.0;
    for &v in values {
        let v = v as f64;
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    let mean = sum / n;
    let std = (values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let width = (max - min) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = if width > 0.0 {
            (((v as f64 - min) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[i] += 1;
    }
    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (min + i as f64 * width, min + (i + 1) as f64 * width, c))
        .collect();
    let inside = values
        .iter()
        .filter(|&&v| (v as f64 - mean).abs() <= window * std)
        .count();
    Ok(LayerStats {
        min,
        max,
        mean,
        std,
        histogram,
        central_mass: inside as f64 / n,
        window,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub layers: BTreeMap<String, LayerStats>,
}

impl DistributionStats {
    /// One row per (layer, bin), with the layer summary repeated.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer",
            "min",
            "max",
            "mean",
            "std",
            "central_mass",
            "bin_left",
            "bin_right",
            "count",
        ])?;
        for (l, s) in &self.layers {
            for &(a, b, c) in &s.histogram {
                w.write_record([
                    l.clone(),
                    format!("{:e}", s.min),
                    format!("{:e}", s.max),
                    format!("{:e}", s.mean),
                    format!("{:e}", s.std),
                    format!("{:e}", s.central_mass),
                    format!("{a:e}"),
                    format!("{b:e}"),
                    c.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Statistics of each layer's output before activation quantization, over
/// every calibration input of every sampled step.
pub fn distribution_stats(
    model: &QuantizedModel,
    calib: &CalibrationSet,
    layers: &BTreeSet<String>,
    bins: usize,
    window: f64,
) -> Result<DistributionStats> {
    let mut values: BTreeMap<String, Vec<f32>> =
        layers.iter().map(|l| (l.clone(), Vec::new())).collect();
    for t in calib.sampled_steps() {
        let rec = calib.record(t)?;
        let (_, _, pre) = model.predict_with_activations(&rec.x_t, t)?;
        for (l, v) in values.iter_mut() {
            let a = pre.get(l).ok_or_else(|| Error::MissingActivation {
                layer: l.clone(),
                step: t,
            })?;
            v.extend_from_slice(a.data());
        }
    }
    let layers = values
        .into_iter()
        .map(|(l, v)| Ok((l, stats_of(&v, bins, window)?)))
        .collect::<Result<_>>()?;
    Ok(DistributionStats { layers })
}
