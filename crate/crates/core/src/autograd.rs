//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly, stores
//! its output, and remembers which nodes it read. [`Graph::backward`] walks
//! the tape once in reverse and returns the gradient of every named
//! parameter reachable from the loss.
//!
//! ```
//! use quest_core::autograd::Graph;
//! use quest_core::tensor::Tensor;
//!
//! let mut g: Graph = Graph::new();
//! let w = g.param("w", Tensor::scalar(3.0));
//! let zero = g.constant(Tensor::scalar(0.0));
//! let loss = g.mse(w, zero).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("w").unwrap().item(), 6.0);
//! ```

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{broadcast_map, col2im, gemm_nn, gemm_nt, gemm_tn, im2col};
use crate::quant::{fake_quant_backward, fake_quant_forward};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The differentiable op basis. Everything else in the model is composed
/// from these plus the shape-only `reshape`/`transpose`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d3x3,
    Add,
    Mul,
    Scale(f64),
    Silu,
    Softmax,
    GroupNorm { groups: usize },
    Mean,
    Mse,
}

impl OpKind {
    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Conv2d3x3 | OpKind::Add | OpKind::Mul | OpKind::Mse => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv2d(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    GroupNorm {
        x: Var,
        groups: usize,
        rstd: Vec<T>,
    },
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
    Transpose(Var),
    FakeQuant {
        x: Var,
        scale: Var,
        zero: i32,
        qmin: i32,
        qmax: i32,
    },
    FakeQuantChannels {
        x: Var,
        grid: Vec<(T, i32)>,
        qmin: i32,
        qmax: i32,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<String>,
}

/// Gradients of named parameters, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap<T: Real = f32>(BTreeMap<String, Tensor<T>>);

impl<T: Real> GradientMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `weight · other` into `self`, inserting missing names.
    pub fn add_scaled(&mut self, other: &GradientMap<T>, weight: T) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += weight * b),
                None => {
                    let data = g.data().iter().map(|&b| weight * b).collect();
                    self.0
                        .insert(name.clone(), Tensor::new(g.shape(), data).unwrap());
                }
            }
        }
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let k = T::of(max_norm / norm);
            for t in self.0.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }
}

/// A single-threaded computation tape.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.into());
        v
    }

    /// Dispatches one of the basis ops by kind.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::Contract(format!(
                "{kind:?} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d3x3 => self.conv2d(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Scale(c) => Ok(self.scale(inputs[0], T::of(c))),
            OpKind::Silu => Ok(self.silu(inputs[0])),
            OpKind::Softmax => Ok(self.softmax(inputs[0])),
            OpKind::GroupNorm { groups } => self.group_norm(inputs[0], groups),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::Mse => self.mse(inputs[0], inputs[1]),
        }
    }

    /// `(…, m, k) × (k, n)` or batched `(b, m, k) × (b, k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let dims = matmul_dims(&sa, &sb)?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..dims.batch {
                let a_off = bi * dims.m * dims.k;
                let b_off = if dims.shared_b {
                    0
                } else {
                    bi * dims.k * dims.n
                };
                gemm_nn(
                    &ad[a_off..a_off + dims.m * dims.k],
                    &bd[b_off..b_off + dims.k * dims.n],
                    &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
                    dims.m,
                    dims.k,
                    dims.n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.n);
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), needs))
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x: (b, cin, h, w)`,
    /// `w: (cout, cin, 3, 3)`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(shape_err("conv2d_3x3", format!("x {sx:?}, w {sw:?}")));
        }
        let (b, cin, h, wd, cout) = (sx[0], sx[1], sx[2], sx[3], sw[0]);
        let hw = h * wd;
        let mut out = vec![T::zero(); b * cout * hw];
        let mut cols = vec![T::zero(); cin * 9 * hw];
        {
            let (xd, wdat) = (self.value(x).data(), self.value(w).data());
            for bi in 0..b {
                im2col(
                    &xd[bi * cin * hw..(bi + 1) * cin * hw],
                    cin,
                    h,
                    wd,
                    &mut cols,
                );
                gemm_nn(
                    wdat,
                    &cols,
                    &mut out[bi * cout * hw..(bi + 1) * cout * hw],
                    cout,
                    cin * 9,
                    hw,
                );
            }
        }
        let needs = self.any_grad(&[x, w]);
        Ok(self.push(
            Tensor::new(&[b, cout, h, wd], out)?,
            Op::Conv2d(x, w),
            needs,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = sa.len() == sb.len() && sa.iter().zip(sb).all(|(&x, &y)| x == y || y == 1);
        if ok {
            Ok(())
        } else {
            Err(shape_err(op, format!("{sa:?} with {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check_broadcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<T> = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let map = broadcast_map(ta.shape(), tb.shape());
            ta.data()
                .iter()
                .zip(&map)
                .map(|(&x, &j)| f(x, tb.data()[j]))
                .collect()
        };
        Tensor::new(ta.shape(), data)
    }

    /// Elementwise `a + b`; `b` may broadcast along its size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect()).unwrap();
        let needs = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape(),
            ta.data().iter().map(|&x| x * sigmoid(x)).collect(),
        )
        .unwrap();
        let needs = self.any_grad(&[a]);
        self.push(t, Op::Silu(a), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = *ta.shape().last().unwrap();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(ta.shape(), out).unwrap();
        let needs = self.any_grad(&[a]);
        self.push(t, Op::Softmax(a), needs)
    }

    /// Group normalization without affine parameters over axis 1 and all
    /// trailing axes. Input is `(b, c, …)` with `c` divisible by `groups`.
    pub fn group_norm(&mut self, a: Var, groups: usize) -> Result<Var> {
        let eps = T::of(1e-5);
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
            return Err(shape_err(
                "group_norm",
                format!("{s:?} with {groups} groups"),
            ));
        }
        let per_sample: usize = s[1..].iter().product();
        let gsize = per_sample / groups;
        let mut out = ta.data().to_vec();
        let mut rstd = Vec::with_capacity(s[0] * groups);
        for chunk in out.chunks_mut(gsize) {
            let n = T::of(chunk.len() as f64);
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let t = Tensor::new(s, out)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(t, Op::GroupNorm { x: a, groups, rstd }, needs))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), needs)
    }

    /// Mean squared error between equally shaped tensors, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let m = T::of(ta.mse(tb));
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() < 2 {
            return Err(shape_err("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![T::zero(); ta.len()];
        for (blk, src) in ta.data().chunks(r * c).enumerate() {
            let dst = &mut out[blk * r * c..(blk + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let t = Tensor::new(&shape, out)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(t, Op::Transpose(a), needs))
    }

    /// Uniform affine fake quantization with a scalar scale node.
    ///
    /// Gradients follow the straight-through rule for `x` and the
    /// learned-step-size rule for `scale`; see [`crate::quant`].
    pub fn fake_quant(
        &mut self,
        x: Var,
        scale: Var,
        zero: i32,
        qmin: i32,
        qmax: i32,
    ) -> Result<Var> {
        let s = self.value(scale);
        if s.len() != 1 {
            return Err(shape_err(
                "fake_quant",
                format!("scale must be scalar, got {:?}", s.shape()),
            ));
        }
        let s = s.item();
        if !(s > T::zero()) {
            return Err(Error::Contract(format!(
                "fake_quant scale must be positive, got {s}"
            )));
        }
        let tx = self.value(x);
        let out = tx
            .data()
            .iter()
            .map(|&v| fake_quant_forward(v, s, zero, qmin, qmax))
            .collect();
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.any_grad(&[x, scale]);
        Ok(self.push(
            t,
            Op::FakeQuant {
                x,
                scale,
                zero,
                qmin,
                qmax,
            },
            needs,
        ))
    }

    /// Fake quantization with a fixed grid per leading-axis channel. Only the
    /// straight-through input gradient is propagated.
    pub fn fake_quant_channels(
        &mut self,
        x: Var,
        grid: &[(f32, i32)],
        qmin: i32,
        qmax: i32,
    ) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape()[0] != grid.len() {
            return Err(shape_err(
                "fake_quant_channels",
                format!("{:?} with {} channels", tx.shape(), grid.len()),
            ));
        }
        let grid: Vec<(T, i32)> = grid.iter().map(|&(s, z)| (T::of(s as f64), z)).collect();
        let row = tx.len() / grid.len();
        let out = tx
            .data()
            .chunks(row)
            .zip(&grid)
            .flat_map(|(c, &(s, z))| {
                c.iter()
                    .map(move |&v| fake_quant_forward(v, s, z, qmin, qmax))
            })
            .collect();
        let t = Tensor::new(tx.shape(), out)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            t,
            Op::FakeQuantChannels {
                x,
                grid,
                qmin,
                qmax,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = GradientMap::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(name) = &node.param {
                let t = Tensor::new(node.value.shape(), g).expect("grad matches value shape");
                match out.0.get_mut(name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, &b)| *a += b),
                    None => {
                        out.0.insert(name.clone(), t);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let dims = matmul_dims(self.value(*a).shape(), self.value(*b).shape()).unwrap();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (m, k, n) = (dims.m, dims.k, dims.n);
                self.send(grads, *a, |ga| {
                    for bi in 0..dims.batch {
                        let b_off = if dims.shared_b { 0 } else { bi * k * n };
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[b_off..b_off + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.send(grads, *b, |gb| {
                    for bi in 0..dims.batch {
                        let b_off = if dims.shared_b { 0 } else { bi * k * n };
                        gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Conv2d(x, w) => {
                let sx = self.value(*x).shape();
                let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let cout = self.value(*w).shape()[0];
                let hw = h * wd;
                let (xd, wdat) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = vec![T::zero(); cin * 9 * hw];
                if self.nodes[w.0].needs_grad {
                    self.send(grads, *w, |gw| {
                        for bi in 0..b {
                            im2col(
                                &xd[bi * cin * hw..(bi + 1) * cin * hw],
                                cin,
                                h,
                                wd,
                                &mut cols,
                            );
                            gemm_nt(
                                &g[bi * cout * hw..(bi + 1) * cout * hw],
                                &cols,
                                gw,
                                cout,
                                hw,
                                cin * 9,
                            );
                        }
                    });
                }
                self.send(grads, *x, |gx| {
                    for bi in 0..b {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(
                            wdat,
                            &g[bi * cout * hw..(bi + 1) * cout * hw],
                            &mut cols,
                            cout,
                            cin * 9,
                            hw,
                        );
                        col2im(
                            &cols,
                            cin,
                            h,
                            wd,
                            &mut gx[bi * cin * hw..(bi + 1) * cin * hw],
                        );
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.send(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                self.send(grads, *b, |gb| {
                    if sa == sb {
                        gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
                    } else {
                        for (j, &y) in broadcast_map(sa, sb).iter().zip(g) {
                            gb[*j] += sign * y;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let map = (ta.shape() != tb.shape()).then(|| broadcast_map(ta.shape(), tb.shape()));
                let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
                self.send(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * tb.data()[bidx(i)];
                    }
                });
                self.send(grads, *b, |gb| {
                    for (i, (&y, &av)) in g.iter().zip(ta.data()).enumerate() {
                        gb[bidx(i)] += y * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.send(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y)
                });
            }
            Op::Silu(a) => {
                let xa = self.value(*a).data();
                self.send(grads, *a, |ga| {
                    for ((dx, &y), &x) in ga.iter_mut().zip(g).zip(xa) {
                        let s = sigmoid(x);
                        *dx += y * s * (T::one() + x * (T::one() - s));
                    }
                });
            }
            Op::Softmax(a) => {
                let yv = node.value.data();
                let n = *node.value.shape().last().unwrap();
                self.send(grads, *a, |ga| {
                    for ((dx, gy), y) in ga.chunks_mut(n).zip(g.chunks(n)).zip(yv.chunks(n)) {
                        let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::GroupNorm { x, groups, rstd } => {
                let yv = node.value.data();
                let s = node.value.shape();
                let gsize = s[1..].iter().product::<usize>() / groups;
                self.send(grads, *x, |gx| {
                    for (gi, ((dx, gy), y)) in gx
                        .chunks_mut(gsize)
                        .zip(g.chunks(gsize))
                        .zip(yv.chunks(gsize))
                        .enumerate()
                    {
                        let n = T::of(gsize as f64);
                        let mg = gy.iter().copied().sum::<T>() / n;
                        let mgy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..gsize {
                            dx[j] += rstd[gi] * (gy[j] - mg - y[j] * mgy);
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                self.send(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let k = T::of(2.0) * g[0] / T::of(ta.len() as f64);
                self.send(grads, *a, |ga| {
                    for ((dx, &x), &y) in ga.iter_mut().zip(ta).zip(tb) {
                        *dx += k * (x - y);
                    }
                });
                self.send(grads, *b, |gb| {
                    for ((dy, &x), &y) in gb.iter_mut().zip(ta).zip(tb) {
                        *dy -= k * (x - y);
                    }
                });
            }
            Op::Reshape(a) => {
                self.send(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                // output is (…, r, c); input was (…, c, r)
                self.send(grads, *a, |ga| {
                    for (blk, gy) in g.chunks(r * c).enumerate() {
                        let dst = &mut ga[blk * r * c..(blk + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dst[j * r + i] += gy[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::FakeQuant {
                x,
                scale,
                zero,
                qmin,
                qmax,
            } => {
                let s = self.value(*scale).item();
                let xv = self.value(*x).data();
                let mut ds = T::zero();
                let need_s = self.nodes[scale.0].needs_grad;
                self.send(grads, *x, |gx| {
                    for ((dx, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let (pass, _) = fake_quant_backward(v, s, *zero, *qmin, *qmax);
                        *dx += gy * pass;
                    }
                });
                if need_s {
                    for (&gy, &v) in g.iter().zip(xv) {
                        ds += gy * fake_quant_backward(v, s, *zero, *qmin, *qmax).1;
                    }
                    self.send(grads, *scale, |gs| gs[0] += ds);
                }
            }
            Op::FakeQuantChannels {
                x,
                grid,
                qmin,
                qmax,
            } => {
                let xv = self.value(*x).data();
                let row = xv.len() / grid.len();
                self.send(grads, *x, |gx| {
                    for (i, dx) in gx.iter_mut().enumerate() {
                        let (s, z) = grid[i / row];
                        *dx += g[i] * fake_quant_backward(xv[i], s, z, *qmin, *qmax).0;
                    }
                });
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatDims> {
    let bad = || shape_err("matmul", format!("{sa:?} x {sb:?}"));
    if sa.len() < 2 || sb.len() < 2 {
        return Err(bad());
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(bad());
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    if sb.len() == 2 {
        Ok(MatDims {
            batch,
            m,
            k,
            n,
            shared_b: true,
        })
    } else if sb[..sb.len() - 2] == sa[..sa.len() - 2] {
        Ok(MatDims {
            batch,
            m,
            k,
            n,
            shared_b: false,
        })
    } else {
        Err(bad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g: Graph = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.apply(OpKind::MatMul, &[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3., 4.]);
    }

    #[test]
    fn mse_of_equal_inputs_is_zero() {
        let mut g: Graph = Graph::new();
        let a = g.constant(t(&[3], &[1., 2., 3.]));
        let b = g.constant(t(&[3], &[1., 2., 3.]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn silu_fixed_point_at_zero() {
        let mut g: Graph = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let y = g.silu(a);
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut g: Graph = Graph::new();
        let w = g.param("w", Tensor::scalar(3.0));
        let one = g.constant(Tensor::scalar(1.0));
        let wx = g.mul(w, one).unwrap();
        let zero = g.constant(Tensor::scalar(0.0));
        let l = g.mse(wx, zero).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get("w").unwrap().item(), 6.0);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g: Graph = Graph::new();
        let w = g.param("w", t(&[4], &[1., -2., 5., 0.5]));
        let l = g.mean(w);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get("w").unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut g: Graph = Graph::new();
        let w = g.param("w", Tensor::scalar(2.0));
        let y = g.mul(w, w).unwrap(); // w²
        let z = g.add(y, w).unwrap(); // w² + w
        let l = g.mean(z);
        assert_eq!(g.backward(l).unwrap().get("w").unwrap().item(), 5.0);
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let mut g: Graph = Graph::new();
        let w = g.param("w", t(&[2], &[1., 2.]));
        let y = g.scale(w, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let c = g.constant(t(&[2], &[1., 2.]));
        let l = g.mean(c);
        assert!(matches!(g.backward(l), Err(Error::Detached)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g: Graph = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let e = g.matmul(a, b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
        let c = g.constant(Tensor::zeros(&[3]));
        let e = g.mse(a, c).unwrap_err().to_string();
        assert!(e.contains("mse"));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 2, 2], 1.0));
        let b = g.param("b", Tensor::zeros(&[1, 3, 1, 1]));
        let y = g.add(x, b).unwrap();
        let l = g.mean(y);
        let gr = g.backward(l).unwrap();
        let gb = gr.get("b").unwrap();
        assert_eq!(gb.shape(), &[1, 3, 1, 1]);
        for &v in gb.data() {
            assert!((v - 8.0 / 24.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut g: Graph = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.transpose(a).unwrap();
        assert_eq!(g.value(b).shape(), &[3, 2]);
        assert_eq!(g.value(b).data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
