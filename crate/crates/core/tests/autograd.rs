mod common;

use proptest::prelude::*;
use quest_core::autograd::{Graph, OpKind};
use quest_core::gradcheck::{finite_difference_grad, max_relative_error};
use quest_core::real::Real;
use quest_core::rng::substream;
use quest_core::Tensor;

use common::ToyNet;

fn shapes(kind: OpKind) -> Vec<Vec<usize>> {
    match kind {
        OpKind::MatMul => vec![vec![3, 4], vec![4, 2]],
        OpKind::Conv2d3x3 => vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3]],
        OpKind::Add | OpKind::Mul => vec![vec![3, 4], vec![1, 4]],
        OpKind::Mse => vec![vec![3, 4], vec![3, 4]],
        OpKind::Softmax => vec![vec![3, 5]],
        OpKind::GroupNorm { .. } => vec![vec![2, 4, 3, 3]],
        _ => vec![vec![3, 4]],
    }
}

const KINDS: [OpKind; 10] = [
    OpKind::MatMul,
    OpKind::Conv2d3x3,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale(0.7),
    OpKind::Silu,
    OpKind::Softmax,
    OpKind::GroupNorm { groups: 2 },
    OpKind::Mean,
    OpKind::Mse,
];

/// `mean(op(inputs) ⊙ r)`, so every output coordinate carries its own weight.
fn weighted<T: Real>(
    kind: OpKind,
    inputs: &[Tensor<f64>],
    r: &Tensor<f64>,
) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<T>::new();
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(format!("in{i}"), t.cast()))
        .collect();
    let out = g.apply(kind, &vars).unwrap();
    let rv = g.constant(r.cast());
    let prod = g.mul(out, rv).unwrap();
    let loss = g.mean(prod);
    let grads = g.backward(loss).unwrap();
    let per = (0..inputs.len())
        .map(|i| {
            grads
                .get(&format!("in{i}"))
                .unwrap()
                .data()
                .iter()
                .map(|&v| Real::to_f64(v))
                .collect()
        })
        .collect();
    (Real::to_f64(g.value(loss).item()), per)
}

fn output_shape(kind: OpKind, inputs: &[Tensor<f64>]) -> Vec<usize> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.apply(kind, &vars).unwrap();
    g.value(out).shape().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = substream(seed, "op");
        for kind in KINDS {
            let inputs: Vec<Tensor<f64>> = shapes(kind).iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
            let r = Tensor::randn(&output_shape(kind, &inputs), 1.0, &mut rng);
            let (_, analytic) = weighted::<f32>(kind, &inputs, &r);
            for (i, a) in analytic.iter().enumerate() {
                let oracle = finite_difference_grad(
                    |t| {
                        let mut xs = inputs.clone();
                        xs[i] = t.clone();
                        Ok(weighted::<f64>(kind, &xs, &r).0)
                    },
                    &inputs[i],
                    1e-3,
                )
                .unwrap();
                let err = max_relative_error(a, oracle.data());
                prop_assert!(err < 1e-3, "{kind:?} input {i}: relative error {err}");
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let net = ToyNet::random(seed);
        let grads = |ca: f64, cb: f64| {
            let mut g = Graph::<f64>::new();
            let l1 = net.loss(&mut g, &net.params).unwrap();
            let other = ToyNet::random(seed ^ 1);
            let l2 = other.loss(&mut g, &net.params).unwrap();
            let s1 = g.scale(l1, ca);
            let s2 = g.scale(l2, cb);
            let total = g.add(s1, s2).unwrap();
            g.backward(total).unwrap()
        };
        let (g1, g2, mix) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(a, b));
        for (name, m) in mix.iter() {
            let (x, y) = (g1.get(name).unwrap(), g2.get(name).unwrap());
            for ((&mv, &xv), &yv) in m.data().iter().zip(x.data()).zip(y.data()) {
                prop_assert!((mv - (a * xv + b * yv)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn toy_net_gradients_match_oracle_on_twenty_instances() {
    for seed in 0..20 {
        let err = ToyNet::random(seed).gradient_error(1e-3).unwrap();
        assert!(err < 1e-3, "instance {seed}: relative error {err}");
    }
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let net = ToyNet::random(11);
    let run = || {
        let mut g = Graph::<f32>::new();
        let l = net.loss(&mut g, &net.params).unwrap();
        (g.value(l).clone(), g.backward(l).unwrap())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert!(v1.bit_eq(&v2));
    for (name, t) in g1.iter() {
        assert!(t.bit_eq(g2.get(name).unwrap()), "{name}");
    }
}
