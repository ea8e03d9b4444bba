//! A small UNet: two down/up stages, additive time-embedding injection after
//! a two-layer projection, and one attention block at the bottleneck.
//!
//! ```text
//! e(t) ─ time.fc1 ─ silu ─ time.fc2 ─ silu ─┬─ down1.temb ─┬ … (one per block)
//! x ─ conv_in ─ down1 ─ pool ─ down2 ─ pool ─ mid (attention + ff)
//!                 │              │              │
//!                 │              └──── + ── up2 ┘
//!                 └─────────────────── + ── up1 ─ conv_out ─ ε̂
//! ```
//!
//! Every parameterized layer is registered under a stable id with a role
//! tag. The forward pass optionally fake-quantizes each layer's weights and
//! output activation, and always exposes per-layer outputs by id.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::quant::{TimeAwareQuantizerSet, WeightQuantizer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    TimeEmbed,
    AttentionQkv,
    AttentionProj,
    FeedForward,
    Conv,
    Other,
}

impl Role {
    pub fn is_attention_related(self) -> bool {
        matches!(
            self,
            Role::AttentionQkv | Role::AttentionProj | Role::FeedForward
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear { fan_in: usize, fan_out: usize },
    Conv3x3 { cin: usize, cout: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub role: Role,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.w", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.id)
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out } => vec![fan_in, fan_out],
            LayerKind::Conv3x3 { cin, cout } => vec![cout, cin, 3, 3],
        }
    }

    fn bias_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Linear { fan_out, .. } => vec![1, fan_out],
            LayerKind::Conv3x3 { cout, .. } => vec![1, cout, 1, 1],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear { fan_in, .. } => fan_in,
            LayerKind::Conv3x3 { cin, .. } => cin * 9,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub channels: usize,
    pub resolution: usize,
    pub widths: [usize; 2],
    pub emb_dim: usize,
    pub temb_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            resolution: 16,
            widths: [8, 16],
            emb_dim: 32,
            temb_dim: 32,
            groups: 4,
        }
    }
}

/// Sets of selectively finetuned layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub time_embed: BTreeSet<String>,
    pub attention: BTreeSet<String>,
}

impl LayerSelection {
    pub fn contains(&self, layer: &str) -> bool {
        self.time_embed.contains(layer) || self.attention.contains(layer)
    }
}

/// Sinusoidal embedding of step `t ≥ 1`: `d/2` sines then `d/2` cosines at
/// frequencies `10000^(-j/(d/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::Contract("time steps start at 1".into()));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Contract(format!(
            "embedding dimension must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[j] = arg.sin() as f32;
        out[half + j] = arg.cos() as f32;
    }
    Tensor::new(&[1, dim], out)
}

/// Stacked embeddings for a batch of steps, shape `(len, dim)`.
pub fn time_embeddings(steps: &[usize], dim: usize) -> Result<Tensor> {
    let rows = steps
        .iter()
        .map(|&t| time_embedding(t, dim))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&rows)
}

/// Quantization state applied during a forward pass at step `t`.
#[derive(Clone, Copy)]
pub struct QuantView<'a> {
    pub weights: &'a BTreeMap<String, WeightQuantizer>,
    pub acts: &'a TimeAwareQuantizerSet,
    pub t: usize,
}

/// Options for [`ToyUNet::forward`].
#[derive(Clone, Copy, Default)]
pub struct ForwardOpts<'a> {
    pub quant: Option<QuantView<'a>>,
    /// Parameter names (weights, biases, activation scales) to register as
    /// trainable tape leaves; everything else is a constant.
    pub trainable: Option<&'a BTreeSet<String>>,
}

/// Result of a forward pass.
pub struct UNetOutput {
    pub eps: Var,
    /// Output of each layer as seen by the next one (after activation
    /// quantization when quantized).
    pub acts: BTreeMap<String, Var>,
    /// Output of each layer before activation quantization.
    pub pre_quant: BTreeMap<String, Var>,
    /// Input of each layer.
    pub inputs: BTreeMap<String, Var>,
}

/// Name of the trainable scale of `layer`'s activation quantizer in `cluster`.
pub fn act_scale_name(layer: &str, cluster: usize) -> String {
    format!("act/{layer}/{cluster}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyUNet {
    pub config: UNetConfig,
    pub params: ParamStore,
    registry: Vec<LayerSpec>,
}

fn registry(cfg: &UNetConfig) -> Vec<LayerSpec> {
    let [c1, c2] = cfg.widths;
    let (e, d) = (cfg.emb_dim, cfg.temb_dim);
    let lin = |id: &str, role, fan_in, fan_out| LayerSpec {
        id: id.into(),
        role,
        kind: LayerKind::Linear { fan_in, fan_out },
    };
    let conv = |id: &str, cin, cout| LayerSpec {
        id: id.into(),
        role: Role::Conv,
        kind: LayerKind::Conv3x3 { cin, cout },
    };
    vec![
        lin("time.fc1", Role::TimeEmbed, e, d),
        lin("time.fc2", Role::TimeEmbed, d, d),
        conv("conv_in", cfg.channels, c1),
        conv("down1.conv", c1, c1),
        lin("down1.temb", Role::TimeEmbed, d, c1),
        conv("down2.conv", c1, c2),
        lin("down2.temb", Role::TimeEmbed, d, c2),
        lin("mid.attn.q", Role::AttentionQkv, c2, c2),
        lin("mid.attn.k", Role::AttentionQkv, c2, c2),
        lin("mid.attn.v", Role::AttentionQkv, c2, c2),
        lin("mid.attn.proj", Role::AttentionProj, c2, c2),
        lin("mid.ff1", Role::FeedForward, c2, 2 * c2),
        lin("mid.ff2", Role::FeedForward, 2 * c2, c2),
        conv("up2.conv", c2, c1),
        lin("up2.temb", Role::TimeEmbed, d, c1),
        conv("up1.conv", c1, c1),
        lin("up1.temb", Role::TimeEmbed, d, c1),
        conv("conv_out", c1, cfg.channels),
    ]
}

/// Average-pooling (2×2) matrix for an `h×w` grid, shape `(h·w, h·w/4)`.
fn pool_matrix(h: usize, w: usize) -> Tensor {
    let (ho, wo) = (h / 2, w / 2);
    let mut m = vec![0.0f32; h * w * ho * wo];
    for y in 0..h {
        for x in 0..w {
            m[(y * w + x) * ho * wo + (y / 2) * wo + x / 2] = 0.25;
        }
    }
    Tensor::new(&[h * w, ho * wo], m).unwrap()
}

/// Nearest-neighbour 2× upsampling matrix from an `h×w` grid.
fn upsample_matrix(h: usize, w: usize) -> Tensor {
    let (ho, wo) = (h * 2, w * 2);
    let mut m = vec![0.0f32; h * w * ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            m[((y / 2) * w + x / 2) * ho * wo + y * wo + x] = 1.0;
        }
    }
    Tensor::new(&[h * w, ho * wo], m).unwrap()
}

impl ToyUNet {
    /// Randomly initialized model (fan-in scaled normal weights, zero biases).
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        Self::validate(&config)?;
        let registry = registry(&config);
        let mut params = ParamStore::new();
        for spec in &registry {
            let std = (1.0 / spec.fan_in() as f32).sqrt();
            params.insert(
                spec.weight_name(),
                Tensor::randn(&spec.weight_shape(), std, rng),
            );
            params.insert(spec.bias_name(), Tensor::zeros(&spec.bias_shape()));
        }
        Ok(Self {
            config,
            params,
            registry,
        })
    }

    /// Model with every parameter equal to zero.
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        Self::validate(&config)?;
        let registry = registry(&config);
        let mut params = ParamStore::new();
        for spec in &registry {
            params.insert(spec.weight_name(), Tensor::zeros(&spec.weight_shape()));
            params.insert(spec.bias_name(), Tensor::zeros(&spec.bias_shape()));
        }
        Ok(Self {
            config,
            params,
            registry,
        })
    }

    /// Rebuilds a model from stored parameters, checking every tensor.
    pub fn from_params(config: UNetConfig, params: ParamStore) -> Result<Self> {
        let model = Self::zeros(config)?;
        for (name, t) in model.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, want {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != model.params.len() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        Ok(Self { params, ..model })
    }

    fn validate(c: &UNetConfig) -> Result<()> {
        let [c1, c2] = c.widths;
        let ok = c.channels > 0
            && c.resolution >= 4
            && c.resolution % 4 == 0
            && c1 % c.groups == 0
            && c2 % c.groups == 0
            && c.emb_dim % 2 == 0
            && c.emb_dim > 0
            && c.temb_dim > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid UNet configuration {c:?}")))
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.registry
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.registry.iter().find(|l| l.id == id)
    }

    pub fn selection(&self) -> LayerSelection {
        let ids = |f: &dyn Fn(Role) -> bool| -> BTreeSet<String> {
            self.registry
                .iter()
                .filter(|l| f(l.role))
                .map(|l| l.id.clone())
                .collect()
        };
        LayerSelection {
            time_embed: ids(&|r| r == Role::TimeEmbed),
            attention: ids(&|r| r.is_attention_related()),
        }
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [
            self.config.channels,
            self.config.resolution,
            self.config.resolution,
        ]
    }

    /// Predicted noise for a batch `x: (b, c, h, w)` with embeddings
    /// `emb: (b, emb_dim)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        emb: Var,
        opts: &ForwardOpts,
    ) -> Result<UNetOutput> {
        let mut run = Run::new(self, g, opts)?;
        let eps = run.body(x, emb)?;
        Ok(UNetOutput {
            eps,
            acts: run.acts,
            pre_quant: run.pre_quant,
            inputs: run.inputs,
        })
    }

    /// Applies the single layer `id` to `x`, with the same quantization and
    /// parameter binding rules as [`forward`](Self::forward).
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        id: &str,
        x: Var,
        opts: &ForwardOpts,
    ) -> Result<Var> {
        Run::new(self, g, opts)?.layer(id, x)
    }

    /// Inference convenience: builds a throwaway tape of constants.
    pub fn predict(&self, x: &Tensor, emb: &Tensor, quant: Option<QuantView>) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ev = g.constant(emb.clone());
        let out = self.forward(
            &mut g,
            xv,
            ev,
            &ForwardOpts {
                quant,
                trainable: None,
            },
        )?;
        Ok(g.value(out.eps).clone())
    }

    /// Like [`predict`](Self::predict) but also returns every layer's
    /// output (post-quantization) and pre-quantization output.
    pub fn predict_with_activations(
        &self,
        x: &Tensor,
        emb: &Tensor,
        quant: Option<QuantView>,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let ev = g.constant(emb.clone());
        let out = self.forward(
            &mut g,
            xv,
            ev,
            &ForwardOpts {
                quant,
                trainable: None,
            },
        )?;
        let acts = out
            .acts
            .iter()
            .map(|(k, &v)| (k.clone(), g.value(v).clone()))
            .collect();
        let pre = out
            .pre_quant
            .iter()
            .map(|(k, &v)| (k.clone(), g.value(v).clone()))
            .collect();
        Ok((g.value(out.eps).clone(), acts, pre))
    }
}

struct Run<'m, 'g, 'o> {
    model: &'m ToyUNet,
    g: &'g mut Graph,
    opts: &'o ForwardOpts<'o>,
    acts: BTreeMap<String, Var>,
    pre_quant: BTreeMap<String, Var>,
    inputs: BTreeMap<String, Var>,
    cluster: Option<usize>,
}

impl<'m, 'g, 'o> Run<'m, 'g, 'o> {
    fn new(model: &'m ToyUNet, g: &'g mut Graph, opts: &'o ForwardOpts<'o>) -> Result<Self> {
        let cluster = match opts.quant {
            Some(q) => Some(q.acts.cluster_of(q.t)?),
            None => None,
        };
        Ok(Self {
            model,
            g,
            opts,
            acts: BTreeMap::new(),
            pre_quant: BTreeMap::new(),
            inputs: BTreeMap::new(),
            cluster,
        })
    }

    fn bind(&mut self, name: &str) -> Result<Var> {
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(match self.opts.trainable {
            Some(set) if set.contains(name) => self.g.param(name, t),
            _ => self.g.constant(t),
        })
    }

    /// Weight binding, optional weight fake-quant, the layer op, bias,
    /// optional activation fake-quant, and activation capture.
    fn layer(&mut self, id: &str, x: Var) -> Result<Var> {
        let spec = self
            .model
            .layer(id)
            .ok_or_else(|| Error::Contract(format!("unknown layer `{id}`")))?
            .clone();
        let mut w = self.bind(&spec.weight_name())?;
        let b = self.bind(&spec.bias_name())?;
        if let Some(q) = self.opts.quant {
            if let Some(wq) = q.weights.get(id) {
                w = wq.apply(self.g, w)?;
            }
        }
        let y = match spec.kind {
            LayerKind::Linear { .. } => self.g.matmul(x, w)?,
            LayerKind::Conv3x3 { .. } => self.g.conv2d(x, w)?,
        };
        let y = self.g.add(y, b)?;
        self.inputs.insert(id.to_string(), x);
        self.pre_quant.insert(id.to_string(), y);
        let out = match (self.opts.quant, self.cluster) {
            (Some(q), Some(cluster)) if q.acts.covers(id) => {
                let p = *q.acts.get(id, cluster)?;
                let name = act_scale_name(id, cluster);
                let s = Tensor::scalar(p.scale);
                let sv = match self.opts.trainable {
                    Some(set) if set.contains(&name) => self.g.param(name, s),
                    _ => self.g.constant(s),
                };
                self.g.fake_quant(y, sv, p.zero_point, p.qmin, p.qmax)?
            }
            _ => y,
        };
        self.acts.insert(id.to_string(), out);
        Ok(out)
    }

    fn conv_block(&mut self, prefix: &str, x: Var, temb: Var, residual: bool) -> Result<Var> {
        let h = self.layer(&format!("{prefix}.conv"), x)?;
        let t = self.layer(&format!("{prefix}.temb"), temb)?;
        let (b, c) = {
            let s = self.g.value(h).shape();
            (s[0], s[1])
        };
        let t = self.g.reshape(t, &[b, c, 1, 1])?;
        let h = self.g.add(h, t)?;
        let h = self.g.group_norm(h, self.model.config.groups)?;
        let h = self.g.silu(h);
        if residual {
            self.g.add(h, x)
        } else {
            Ok(h)
        }
    }

    fn resample(&mut self, x: Var, up: bool) -> Result<Var> {
        let s = self.g.value(x).shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let m = if up {
            upsample_matrix(h, w)
        } else {
            pool_matrix(h, w)
        };
        let (ho, wo) = if up { (h * 2, w * 2) } else { (h / 2, w / 2) };
        let mv = self.g.constant(m);
        let flat = self.g.reshape(x, &[b * c, h * w])?;
        let y = self.g.matmul(flat, mv)?;
        self.g.reshape(y, &[b, c, ho, wo])
    }

    /// `(b, c, h, w)` → `(b·h·w, c)` tokens.
    fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.g.value(x).shape().to_vec();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let y = self.g.reshape(x, &[b, c, n])?;
        let y = self.g.transpose(y)?;
        self.g.reshape(y, &[b * n, c])
    }

    fn attention(&mut self, x: Var) -> Result<Var> {
        let s = self.g.value(x).shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = h * w;
        let tokens = self.to_tokens(x)?;
        let normed = self.g.group_norm(x, self.model.config.groups)?;
        let normed = self.to_tokens(normed)?;
        let q = self.layer("mid.attn.q", normed)?;
        let k = self.layer("mid.attn.k", normed)?;
        let v = self.layer("mid.attn.v", normed)?;
        let q = self.g.reshape(q, &[b, n, c])?;
        let k = self.g.reshape(k, &[b, n, c])?;
        let v = self.g.reshape(v, &[b, n, c])?;
        let kt = self.g.transpose(k)?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, 1.0 / (c as f32).sqrt());
        let attn = self.g.softmax(scores);
        let o = self.g.matmul(attn, v)?;
        let o = self.g.reshape(o, &[b * n, c])?;
        let o = self.layer("mid.attn.proj", o)?;
        let r = self.g.add(tokens, o)?;
        let f = self.layer("mid.ff1", r)?;
        let f = self.g.silu(f);
        let f = self.layer("mid.ff2", f)?;
        let y = self.g.add(r, f)?;
        let y = self.g.reshape(y, &[b, n, c])?;
        let y = self.g.transpose(y)?;
        self.g.reshape(y, &[b, c, h, w])
    }

    fn body(&mut self, x: Var, emb: Var) -> Result<Var> {
        let temb = self.layer("time.fc1", emb)?;
        let temb = self.g.silu(temb);
        let temb = self.layer("time.fc2", temb)?;
        let temb = self.g.silu(temb);

        let h0 = self.layer("conv_in", x)?;
        let d1 = self.conv_block("down1", h0, temb, true)?;
        let p1 = self.resample(d1, false)?;
        let d2 = self.conv_block("down2", p1, temb, false)?;
        let p2 = self.resample(d2, false)?;
        let m = self.attention(p2)?;
        let u = self.resample(m, true)?;
        let u = self.g.add(u, d2)?;
        let u2 = self.conv_block("up2", u, temb, false)?;
        let u = self.resample(u2, true)?;
        let u = self.g.add(u, d1)?;
        let u1 = self.conv_block("up1", u, temb, true)?;
        self.layer("conv_out", u1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn batch(model: &ToyUNet, b: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = substream(seed, "unet-test");
        let [c, h, w] = model.sample_shape();
        let x = Tensor::randn(&[b, c, h, w], 1.0, &mut rng);
        let steps: Vec<usize> = (0..b).map(|i| 1 + 7 * i).collect();
        (x, time_embeddings(&steps, model.config.emb_dim).unwrap())
    }

    #[test]
    fn registry_roles_and_selection() {
        let model = ToyUNet::zeros(UNetConfig::default()).unwrap();
        let ids: BTreeSet<_> = model.layers().iter().map(|l| &l.id).collect();
        assert_eq!(ids.len(), model.layers().len());
        let sel = model.selection();
        assert!(sel.time_embed.is_disjoint(&sel.attention));
        assert!(!sel.time_embed.is_empty() && !sel.attention.is_empty());
        let qkv = model
            .layers()
            .iter()
            .filter(|l| l.role == Role::AttentionQkv)
            .count();
        assert_eq!(qkv, 3);
        assert_eq!(
            model
                .layers()
                .iter()
                .filter(|l| l.role == Role::AttentionProj)
                .count(),
            1
        );
        assert_eq!(
            model
                .layers()
                .iter()
                .filter(|l| l.role == Role::FeedForward)
                .count(),
            2
        );
    }

    #[test]
    fn zero_model_outputs_zero() {
        let model = ToyUNet::zeros(UNetConfig::default()).unwrap();
        let (x, e) = batch(&model, 2, 1);
        let y = model.predict(&x, &e, None).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_batch_independent() {
        let model = ToyUNet::new(UNetConfig::default(), &mut substream(3, "init")).unwrap();
        let (x, e) = batch(&model, 3, 2);
        let a = model.predict(&x, &e, None).unwrap();
        let b = model.predict(&x, &e, None).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.all_finite());
        let single = model
            .predict(&x.slice_rows(1, 2), &e.slice_rows(1, 2), None)
            .unwrap();
        assert!(single.bit_eq(&a.slice_rows(1, 2)));
    }

    #[test]
    fn activations_exposed_for_every_layer() {
        let model = ToyUNet::new(UNetConfig::default(), &mut substream(3, "init")).unwrap();
        let (x, e) = batch(&model, 1, 2);
        let (_, acts, pre) = model.predict_with_activations(&x, &e, None).unwrap();
        for l in model.layers() {
            assert!(
                acts.contains_key(&l.id) && pre.contains_key(&l.id),
                "{}",
                l.id
            );
        }
        assert!(acts["down1.temb"].bit_eq(&pre["down1.temb"]));
    }

    #[test]
    fn embeddings_are_distinct_and_deterministic() {
        assert!(time_embedding(0, 32).is_err());
        assert!(time_embedding(3, 31).is_err());
        let all: Vec<Tensor> = (1..=100).map(|t| time_embedding(t, 32).unwrap()).collect();
        for i in 0..all.len() {
            for j in 0..i {
                assert!(all[i].max_abs_diff(&all[j]) > 1e-6, "{i} {j}");
            }
        }
        assert!(time_embedding(17, 32)
            .unwrap()
            .bit_eq(&time_embedding(17, 32).unwrap()));
    }

    #[test]
    fn resampling_matrices() {
        let p = pool_matrix(4, 4);
        let u = upsample_matrix(2, 2);
        // every output pixel of pooling averages 4 inputs
        for col in 0..4 {
            let s: f32 = (0..16).map(|r| p.data()[r * 4 + col]).sum();
            assert_eq!(s, 1.0);
        }
        // upsampling copies each input to 4 outputs
        for row in 0..4 {
            let s: f32 = u.data()[row * 16..(row + 1) * 16].iter().sum();
            assert_eq!(s, 4.0);
        }
    }
}
