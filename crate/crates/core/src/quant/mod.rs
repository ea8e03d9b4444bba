//! Uniform affine quantization.
//!
//! `quantize` maps reals onto an integer grid with `clamp(round(x/s) + Z)`,
//! `dequantize` maps back with `(q - Z)·s`. Rounding is half away from zero
//! (`f32::round`). Fake quantization composes the two in real arithmetic and
//! is differentiable through surrogate gradients:
//!
//! * input: straight-through inside the representable range, zero outside;
//! * scale: the learned-step-size rule, `round(v) - v` for in-range
//!   `v = x/s` and `q_min - Z` / `q_max - Z` for clamped values.

mod init;
mod taquant;

pub use init::{init_minmax, init_mse_search, SCALE_FLOOR};
pub use taquant::{build_cluster_map, ClusterMap, TimeAwareQuantizerSet};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Scale, zero-point and integer range of one quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub bits: u8,
    pub signed: bool,
}

/// Integer grid bounds for a bit-width.
pub fn int_range(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32, bits: u8, signed: bool) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::Contract(format!("bit-width {bits} outside [2, 8]")));
        }
        let (qmin, qmax) = int_range(bits, signed);
        let p = Self {
            scale,
            zero_point,
            qmin,
            qmax,
            bits,
            signed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Contract(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if (self.qmin, self.qmax) != int_range(self.bits, self.signed) {
            return Err(Error::Contract(format!(
                "range [{}, {}] does not match {}-bit {}",
                self.qmin,
                self.qmax,
                self.bits,
                if self.signed { "signed" } else { "unsigned" }
            )));
        }
        if self.zero_point < self.qmin || self.zero_point > self.qmax {
            return Err(Error::Contract(format!(
                "zero-point {} outside [{}, {}]",
                self.zero_point, self.qmin, self.qmax
            )));
        }
        Ok(())
    }

    /// Same grid with a different scale, floored at [`SCALE_FLOOR`].
    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale.max(SCALE_FLOOR);
        self
    }

    pub fn quantize_value(&self, x: f32) -> i32 {
        quantize_scalar(x, self.scale, self.zero_point, self.qmin, self.qmax) as i32
    }

    pub fn fake_quant_value(&self, x: f32) -> f32 {
        fake_quant_forward(x, self.scale, self.zero_point, self.qmin, self.qmax)
    }
}

/// Precision of a quantizer slot: a bit-width, or full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Bits(u8),
    PassThrough,
}

impl Precision {
    /// `32` is the pass-through sentinel; anything else must lie in [2, 8].
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::PassThrough),
            2..=8 => Ok(Precision::Bits(bits as u8)),
            _ => Err(Error::Contract(format!(
                "bit-width {bits} is neither in [2, 8] nor 32"
            ))),
        }
    }

    pub fn bits(&self) -> u32 {
        match self {
            Precision::Bits(b) => *b as u32,
            Precision::PassThrough => 32,
        }
    }
}

/// A tensor of grid integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

fn quantize_scalar<T: Real>(x: T, s: T, zero: i32, qmin: i32, qmax: i32) -> T {
    ((x / s).round() + T::of(zero as f64))
        .max(T::of(qmin as f64))
        .min(T::of(qmax as f64))
}

pub(crate) fn fake_quant_forward<T: Real>(x: T, s: T, zero: i32, qmin: i32, qmax: i32) -> T {
    (quantize_scalar(x, s, zero, qmin, qmax) - T::of(zero as f64)) * s
}

/// Returns `(d out / d x, d out / d s)` under the surrogate rules.
pub(crate) fn fake_quant_backward<T: Real>(x: T, s: T, zero: i32, qmin: i32, qmax: i32) -> (T, T) {
    let v = x / s;
    let shifted = v + T::of(zero as f64);
    if shifted < T::of(qmin as f64) {
        (T::zero(), T::of((qmin - zero) as f64))
    } else if shifted > T::of(qmax as f64) {
        (T::zero(), T::of((qmax - zero) as f64))
    } else {
        (T::one(), v.round() - v)
    }
}

pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<IntTensor> {
    p.validate()?;
    Ok(IntTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| p.quantize_value(v)).collect(),
    })
}

pub fn dequantize(q: &IntTensor, p: &QuantParams) -> Result<Tensor> {
    p.validate()?;
    if let Some(bad) = q.data.iter().find(|&&v| v < p.qmin || v > p.qmax) {
        return Err(Error::Contract(format!(
            "grid value {bad} outside [{}, {}]",
            p.qmin, p.qmax
        )));
    }
    let data = q
        .data
        .iter()
        .map(|&v| (v - p.zero_point) as f32 * p.scale)
        .collect();
    Tensor::new(&q.shape, data)
}

/// A quantizer attached to a weight or an activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FakeQuantizer {
    pub params: QuantParams,
    pub scale_learnable: bool,
    pub frozen: bool,
}

impl FakeQuantizer {
    /// Weight quantizers never learn after initialization.
    pub fn frozen(params: QuantParams) -> Self {
        Self {
            params,
            scale_learnable: false,
            frozen: true,
        }
    }

    pub fn learnable(params: QuantParams) -> Self {
        Self {
            params,
            scale_learnable: true,
            frozen: false,
        }
    }

    /// Whether the optimizer may touch this quantizer's scale.
    pub fn trains_scale(&self) -> bool {
        self.scale_learnable && !self.frozen
    }

    /// Records fake quantization of `x` on the tape. The scale is a tape
    /// parameter named `scale_name` when this quantizer trains its scale and
    /// a constant otherwise.
    pub fn apply(&self, g: &mut Graph, x: Var, scale_name: Option<&str>) -> Result<Var> {
        let s = Tensor::scalar(self.params.scale);
        let sv = match scale_name {
            Some(name) if self.trains_scale() => g.param(name, s),
            _ => g.constant(s),
        };
        g.fake_quant(
            x,
            sv,
            self.params.zero_point,
            self.params.qmin,
            self.params.qmax,
        )
    }
}

/// Value-level fake quantization (no tape).
pub fn fake_quant(x: &Tensor, fq: &FakeQuantizer) -> Result<Tensor> {
    fq.params.validate()?;
    let data = x
        .data()
        .iter()
        .map(|&v| fq.params.fake_quant_value(v))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Frozen weight quantization: one grid for the whole tensor, or one per
/// output channel (leading axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightQuantizer {
    PerTensor(FakeQuantizer),
    PerChannel(Vec<FakeQuantizer>),
}

impl WeightQuantizer {
    pub fn params(&self) -> Vec<QuantParams> {
        match self {
            WeightQuantizer::PerTensor(fq) => vec![fq.params],
            WeightQuantizer::PerChannel(v) => v.iter().map(|fq| fq.params).collect(),
        }
    }

    pub fn apply(&self, g: &mut Graph, w: Var) -> Result<Var> {
        match self {
            WeightQuantizer::PerTensor(fq) => fq.apply(g, w, None),
            WeightQuantizer::PerChannel(per) => {
                let scales: Vec<(f32, i32)> = per
                    .iter()
                    .map(|fq| (fq.params.scale, fq.params.zero_point))
                    .collect();
                let p = per[0].params;
                g.fake_quant_channels(w, &scales, p.qmin, p.qmax)
            }
        }
    }

    pub fn apply_value(&self, w: &Tensor) -> Result<Tensor> {
        match self {
            WeightQuantizer::PerTensor(fq) => fake_quant(w, fq),
            WeightQuantizer::PerChannel(per) => {
                let row = w.len() / per.len();
                let data = w
                    .data()
                    .chunks(row)
                    .zip(per)
                    .flat_map(|(c, fq)| c.iter().map(move |&v| fq.params.fake_quant_value(v)))
                    .collect();
                Tensor::new(w.shape(), data)
            }
        }
    }
}
