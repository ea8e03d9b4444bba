#![allow(dead_code)]

use std::collections::BTreeMap;

use quest_core::autograd::{Graph, Var};
use quest_core::gradcheck::{finite_difference_grad, max_relative_error};
use quest_core::real::Real;
use quest_core::rng::substream;
use quest_core::{Result, Tensor};

/// A small network over the whole op basis: conv, group norm, silu, a
/// single-head attention built from matmul and softmax, then a gated
/// readout scored by mse and mean.
pub struct ToyNet {
    pub x: Tensor<f64>,
    pub target: Tensor<f64>,
    pub params: BTreeMap<String, Tensor<f64>>,
}

impl ToyNet {
    pub fn random(seed: u64) -> Self {
        let mut rng = substream(seed, "toy-net");
        let mut params = BTreeMap::new();
        let mut p = |name: &str, shape: &[usize], std: f64| {
            params.insert(name.to_string(), Tensor::<f64>::randn(shape, std, &mut rng));
        };
        p("conv.w", &[4, 2, 3, 3], 0.3);
        p("conv.b", &[1, 4, 1, 1], 0.1);
        p("q.w", &[16, 8], 0.25);
        p("k.w", &[16, 8], 0.25);
        p("v.w", &[16, 8], 0.25);
        p("gate", &[1, 1, 8], 1.0);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let target = Tensor::randn(&[2, 4, 8], 0.5, &mut rng);
        Self { x, target, params }
    }

    /// Builds the loss in precision `T` with every parameter trainable.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &BTreeMap<String, Tensor<f64>>,
    ) -> Result<Var> {
        let v: BTreeMap<&str, Var> = params
            .iter()
            .map(|(k, t)| (k.as_str(), g.param(k.clone(), t.cast())))
            .collect();
        let x = g.constant(self.x.cast());
        let h = g.conv2d(x, v["conv.w"])?;
        let h = g.add(h, v["conv.b"])?;
        let h = g.group_norm(h, 2)?;
        let h = g.silu(h);
        let tokens = g.reshape(h, &[2, 4, 16])?;
        let q = g.matmul(tokens, v["q.w"])?;
        let k = g.matmul(tokens, v["k.w"])?;
        let val = g.matmul(tokens, v["v.w"])?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::of(0.35));
        let attn = g.softmax(scores);
        let y = g.matmul(attn, val)?;
        let y = g.mul(y, v["gate"])?;
        let t = g.constant(self.target.cast());
        let fit = g.mse(y, t)?;
        let reg = g.mean(y);
        let reg = g.scale(reg, T::of(0.1));
        g.add(fit, reg)
    }

    pub fn value(&self, params: &BTreeMap<String, Tensor<f64>>) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let l = self.loss(&mut g, params)?;
        Ok(g.value(l).item())
    }

    /// Worst relative error of the single-precision backward pass against
    /// 64-bit central differences, over all parameters.
    pub fn gradient_error(&self, h: f64) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let l = self.loss(&mut g, &self.params)?;
        let grads = g.backward(l)?;
        let mut worst = 0.0f64;
        for (name, p) in &self.params {
            let oracle = finite_difference_grad(
                |t| {
                    let mut ps = self.params.clone();
                    ps.insert(name.clone(), t.clone());
                    self.value(&ps)
                },
                p,
                h,
            )?;
            let analytic: Vec<f64> = grads
                .get(name)
                .unwrap()
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect();
            worst = worst.max(max_relative_error(&analytic, oracle.data()));
        }
        Ok(worst)
    }
}
