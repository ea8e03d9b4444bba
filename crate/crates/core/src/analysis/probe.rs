//! Second-order error analysis on small smooth networks, in 64-bit.
//!
//! The probe maps an input batch `x` through `z = x·w₁` (the activation
//! being perturbed), then `y = silu(z)·wₙ`. Its loss is the mean squared
//! distance of `y` to `z_FP`, the unperturbed output on the same input, so
//! the loss and its gradient vanish at the reference point.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{asymmetry, finite_difference_hessian};
use crate::tensor::Tensor;

/// Step of the finite-difference Hessian.
pub const HESSIAN_STEP: f64 = 1e-5;

/// A twice-differentiable scalar function with an analytic gradient.
pub trait SmoothObjective {
    fn value(&self, z: &Tensor<f64>) -> Result<f64>;
    fn gradient(&self, z: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// `‖z‖²`, whose second-order expansion is exact.
pub struct Quadratic;

impl SmoothObjective for Quadratic {
    fn value(&self, z: &Tensor<f64>) -> Result<f64> {
        Ok(z.data().iter().map(|v| v * v).sum())
    }

    fn gradient(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        Tensor::new(z.shape(), z.data().iter().map(|v| 2.0 * v).collect())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeNet {
    /// Input batch, `(b, d_in)`.
    pub x: Tensor<f64>,
    pub w1: Tensor<f64>,
    /// Last-layer weight `wₙ`, `(d, m)`.
    pub wn: Tensor<f64>,
    /// Full-precision output on `x`, `(b, m)`.
    pub z_fp: Tensor<f64>,
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b[p * m + j];
            }
        }
    }
    out
}

/// Shape of the standard probe: batch 2, input 4, width 4, output 3. At
/// `‖Δ‖ = 1` each of its 8 activation coordinates moves by about 0.35 RMS,
/// comparable to 2 to 3 bit rounding error on unit-scale activations.
pub const STANDARD_PROBE: (usize, usize, usize, usize) = (2, 4, 4, 3);

impl ProbeNet {
    /// The standard probe drawn from `seed`.
    pub fn standard(seed: u64) -> Self {
        let (b, i, d, m) = STANDARD_PROBE;
        Self::random(b, i, d, m, &mut crate::rng::substream(seed, "probe"))
    }

    pub fn random<R: Rng + ?Sized>(
        batch: usize,
        d_in: usize,
        d: usize,
        m: usize,
        rng: &mut R,
    ) -> Self {
        let x = Tensor::randn(&[batch, d_in], 1.0, rng);
        let w1 = Tensor::randn(&[d_in, d], (1.0 / d_in as f64).sqrt(), rng);
        let wn = Tensor::randn(&[d, m], (1.0 / d as f64).sqrt(), rng);
        let mut net = Self {
            x,
            w1,
            wn,
            z_fp: Tensor::zeros(&[batch, m]),
        };
        let z = net.activation();
        net.z_fp = net.output(&z);
        net
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.x.shape()[0], self.wn.shape()[0], self.wn.shape()[1])
    }

    /// The reference activation `z = x·w₁`.
    pub fn activation(&self) -> Tensor<f64> {
        let (b, d_in, d) = (self.x.shape()[0], self.x.shape()[1], self.w1.shape()[1]);
        Tensor::new(&[b, d], matmul(self.x.data(), self.w1.data(), b, d_in, d)).unwrap()
    }

    /// `silu(z)·wₙ`.
    pub fn output(&self, z: &Tensor<f64>) -> Tensor<f64> {
        let (b, d, m) = self.dims();
        let h: Vec<f64> = z.data().iter().map(|&v| silu(v)).collect();
        Tensor::new(&[b, m], matmul(&h, self.wn.data(), b, d, m)).unwrap()
    }

    fn check(&self, z: &Tensor<f64>) -> Result<()> {
        let (b, d, _) = self.dims();
        if z.shape() != [b, d] {
            return Err(Error::Shape {
                op: "probe",
                detail: format!("activation {:?}, want [{b}, {d}]", z.shape()),
            });
        }
        Ok(())
    }
}

impl SmoothObjective for ProbeNet {
    fn value(&self, z: &Tensor<f64>) -> Result<f64> {
        self.check(z)?;
        Ok(self.output(z).mse(&self.z_fp))
    }

    /// `silu'(z) ⊙ [(2/bm)(silu(z)·wₙ − z_FP)·wₙᵀ]`.
    fn gradient(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check(z)?;
        let (b, d, m) = self.dims();
        let y = self.output(z);
        let c = 2.0 / (b * m) as f64;
        let mut g = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += (y.data()[i * m + k] - self.z_fp.data()[i * m + k])
                        * self.wn.data()[j * m + k];
                }
                g[i * d + j] = c * acc * silu_grad(z.data()[i * d + j]);
            }
        }
        Tensor::new(z.shape(), g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(h: &[Vec<f64>], v: &[f64]) -> f64 {
    h.iter().zip(v).map(|(row, vi)| vi * dot(row, v)).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn shifted(z: &Tensor<f64>, dir: &[f64], k: f64) -> Tensor<f64> {
    Tensor::new(
        z.shape(),
        z.data().iter().zip(dir).map(|(a, b)| a + k * b).collect(),
    )
    .unwrap()
}

/// Finite-difference Hessian of `f` at `z`, unsymmetrized.
pub fn hessian<F: SmoothObjective + ?Sized>(f: &F, z: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    finite_difference_hessian(
        |p| {
            Ok(f.gradient(&Tensor::new(z.shape(), p.to_vec())?)?
                .into_data())
        },
        z.data(),
        HESSIAN_STEP,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub delta_norm: f64,
    pub exact_diff: f64,
    pub first_order: f64,
    pub second_order: f64,
    pub residual: f64,
}

impl TaylorReport {
    pub fn relative_residual(&self) -> f64 {
        self.residual.abs() / self.exact_diff.abs()
    }
}

/// Compares `f(z+Δ) − f(z)` with its second-order expansion at `z`.
pub fn taylor_check<F: SmoothObjective + ?Sized>(
    f: &F,
    z: &Tensor<f64>,
    delta: &Tensor<f64>,
) -> Result<TaylorReport> {
    if z.shape() != delta.shape() {
        return Err(Error::Shape {
            op: "taylor_check",
            detail: format!("{:?} vs {:?}", z.shape(), delta.shape()),
        });
    }
    let exact_diff = f.value(&shifted(z, delta.data(), 1.0))? - f.value(z)?;
    let first_order = dot(delta.data(), f.gradient(z)?.data());
    let second_order = 0.5 * quad_form(&hessian(f, z)?, delta.data());
    Ok(TaylorReport {
        delta_norm: norm(delta.data()),
        exact_diff,
        first_order,
        second_order,
        residual: exact_diff - (first_order + second_order),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub k: usize,
    pub delta_norm: f64,
    pub epsilon_norm: f64,
    /// `εᵀ ∇L` at `z + (i−1)ε`, for `i = 1..=K`.
    pub first_terms: Vec<f64>,
    /// `½ εᵀ H ε` at `z + (i−1)ε`.
    pub second_terms: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// Reference output the loss measures against.
    pub z_fp: Vec<f64>,
    pub reading: String,
}

/// How `z_FP` and the expectations are realized here.
pub const DECOMPOSITION_READING: &str =
    "z_FP is the full-precision last-layer output on the same input; \
expectations are batch means; first terms use the chain rule through silu(z)·w_n - z_FP";

/// Splits `Δ` into `K` equal steps `ε` and sums the local second-order
/// expansions along the path.
pub fn decomposition_check(
    net: &ProbeNet,
    z: &Tensor<f64>,
    delta: &Tensor<f64>,
    k: usize,
) -> Result<DecompositionReport> {
    if k == 0 {
        return Err(Error::Contract("decomposition needs K >= 1".into()));
    }
    if z.shape() != delta.shape() {
        return Err(Error::Shape {
            op: "decomposition_check",
            detail: format!("{:?} vs {:?}", z.shape(), delta.shape()),
        });
    }
    let eps: Vec<f64> = delta.data().iter().map(|v| v / k as f64).collect();
    let mut first_terms = Vec::with_capacity(k);
    let mut second_terms = Vec::with_capacity(k);
    for i in 0..k {
        let zi = shifted(z, &eps, i as f64);
        first_terms.push(dot(&eps, net.gradient(&zi)?.data()));
        second_terms.push(0.5 * quad_form(&hessian(net, &zi)?, &eps));
    }
    let lhs = net.value(&shifted(z, delta.data(), 1.0))? - net.value(z)?;
    let first: f64 = first_terms.iter().fold(0.0, |a, b| a + b);
    let second: f64 = second_terms.iter().fold(0.0, |a, b| a + b);
    let rhs = first + second;
    Ok(DecompositionReport {
        k,
        delta_norm: norm(delta.data()),
        epsilon_norm: norm(&eps),
        first_terms,
        second_terms,
        lhs,
        rhs,
        gap: lhs - rhs,
        z_fp: net.z_fp.data().to_vec(),
        reading: DECOMPOSITION_READING.into(),
    })
}

/// Least-squares slope of `ln|residual|` against `ln‖Δ‖`.
pub fn fit_exponent(reports: &[TaylorReport]) -> Result<f64> {
    if reports.len() < 2 {
        return Err(Error::Empty("exponent fit needs two or more points"));
    }
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| (r.delta_norm.ln(), r.residual.abs().ln()))
        .collect();
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite {
            index: 0,
            context: "log of zero residual or norm".into(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Random direction scaled to `norm`.
pub fn random_delta<R: Rng + ?Sized>(
    shape: &[usize],
    norm_target: f64,
    rng: &mut R,
) -> Tensor<f64> {
    let d = Tensor::<f64>::randn(shape, 1.0, rng);
    let n = norm(d.data());
    Tensor::new(
        shape,
        d.data().iter().map(|v| v * norm_target / n).collect(),
    )
    .unwrap()
}

/// Mean relative residual over `trials` random directions of norm
/// `delta_norm` at the reference activation.
pub fn mean_relative_residual(
    net: &ProbeNet,
    delta_norm: f64,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    let z = net.activation();
    let mut sum = 0.0;
    for i in 0..trials {
        let d = random_delta(
            z.shape(),
            delta_norm,
            &mut crate::rng::indexed(seed, "direction", i),
        );
        sum += taylor_check(net, &z, &d)?.relative_residual();
    }
    Ok(sum / trials as f64)
}

/// Max-norm asymmetry of the probe Hessian at `z`.
pub fn hessian_asymmetry<F: SmoothObjective + ?Sized>(f: &F, z: &Tensor<f64>) -> Result<f64> {
    Ok(asymmetry(&hessian(f, z)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::max_relative_error;
    use crate::rng::substream;

    fn probe(seed: u64) -> ProbeNet {
        ProbeNet::standard(seed)
    }

    #[test]
    fn hand_gradient_matches_engine() {
        let net = probe(1);
        let z = shifted(&net.activation(), &[0.3; 8], 1.0);
        let mut g = Graph::<f64>::new();
        let zv = g.param("z", z.clone());
        let h = g.silu(zv);
        let w = g.constant(net.wn.clone());
        let y = g.matmul(h, w).unwrap();
        let t = g.constant(net.z_fp.clone());
        let loss = g.mse(y, t).unwrap();
        assert!((g.value(loss).item() - net.value(&z).unwrap()).abs() < 1e-14);
        let engine = g.backward(loss).unwrap();
        let hand = net.gradient(&z).unwrap();
        assert!(max_relative_error(hand.data(), engine.get("z").unwrap().data()) < 1e-12);
    }

    #[test]
    fn loss_and_gradient_vanish_at_reference() {
        let net = probe(2);
        let z = net.activation();
        assert_eq!(net.value(&z).unwrap(), 0.0);
        assert!(net.gradient(&z).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_expansion_is_exact() {
        let mut rng = substream(3, "q");
        let z = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        for scale in [1e-3, 1.0, 10.0] {
            let r = taylor_check(&Quadratic, &z, &random_delta(&[3, 4], scale, &mut rng)).unwrap();
            assert!(r.residual.abs() < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn hessian_is_symmetric() {
        let net = probe(4);
        assert!(hessian_asymmetry(&net, &net.activation()).unwrap() < 1e-4);
    }

    #[test]
    fn residual_is_cubic_and_breaks_down_at_unit_scale() {
        let net = probe(5);
        let z = net.activation();
        let dir = random_delta(z.shape(), 1.0, &mut substream(5, "dir"));
        let at = |s: f64| {
            taylor_check(
                &net,
                &z,
                &Tensor::new(z.shape(), dir.data().iter().map(|v| v * s).collect()).unwrap(),
            )
            .unwrap()
        };
        let reports: Vec<_> = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1]
            .iter()
            .map(|&s| at(s))
            .collect();
        let p = fit_exponent(&reports).unwrap();
        assert!((2.5..=3.5).contains(&p), "exponent {p}");
        assert!(at(1.0).relative_residual() > 0.0);
        assert!(mean_relative_residual(&ProbeNet::standard(0), 1.0, 10, 0).unwrap() > 0.1);
    }

    #[test]
    fn single_step_decomposition_equals_taylor() {
        let net = probe(6);
        let z = net.activation();
        let d = random_delta(z.shape(), 1.0, &mut substream(6, "dir"));
        let t = taylor_check(&net, &z, &d).unwrap();
        let r = decomposition_check(&net, &z, &d, 1).unwrap();
        assert_eq!(r.gap, t.residual);
        assert_eq!(r.lhs, t.exact_diff);
        assert_eq!(r.first_terms, vec![t.first_order]);
        assert_eq!(r.second_terms, vec![t.second_order]);
    }

    #[test]
    fn gap_shrinks_with_more_steps() {
        let net = probe(7);
        let z = net.activation();
        let d = random_delta(z.shape(), 1.0, &mut substream(7, "dir"));
        let gaps: Vec<f64> = [1, 4, 16, 64]
            .iter()
            .map(|&k| decomposition_check(&net, &z, &d, k).unwrap().gap.abs())
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    }

    #[test]
    fn zero_perturbation_is_zero_on_both_sides() {
        let net = probe(8);
        let z = net.activation();
        let r = decomposition_check(&net, &z, &Tensor::zeros(z.shape()), 4).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(matches!(
            decomposition_check(&net, &z, &Tensor::zeros(z.shape()), 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn epsilon_norm_is_delta_over_k() {
        let net = probe(9);
        let z = net.activation();
        let d = random_delta(z.shape(), 0.5, &mut substream(9, "dir"));
        let r = decomposition_check(&net, &z, &d, 16).unwrap();
        assert!((r.epsilon_norm - r.delta_norm / 16.0).abs() < 1e-15);
    }
}
