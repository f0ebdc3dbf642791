//! The toy segmentation network: strided conv encoder with a /4 and a /16
//! tap, pixel self-attention, a dilated-conv context block, a decoder with a
//! low-level skip, and an auxiliary multi-class decoder of the same shape.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Tensor, TensorError, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};

/// Spatial reduction of the low-level tap.
pub const LOW_STRIDE: usize = 4;
/// Spatial reduction of the high-level feature.
pub const HIGH_STRIDE: usize = 16;

/// Parameter groups with separate update rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    EncoderAttention,
    Decoder,
    References,
    AuxDecoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::EncoderAttention,
        ParamGroup::Decoder,
        ParamGroup::References,
        ParamGroup::AuxDecoder,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// All trainable tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    aux_channels: usize,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

pub(crate) const REF_FG: &str = "refs.fg";
pub(crate) const REF_BG: &str = "refs.bg";
pub(crate) const REF_LOW_FG: &str = "refs.low_fg";
pub(crate) const REF_LOW_BG: &str = "refs.low_bg";

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn conv(&mut self, group: ParamGroup, name: &str, out: usize, inp: usize, k: usize) {
        let fan_in = (inp * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..out * inp * k * k).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(
            group,
            format!("{name}.weight"),
            Tensor::new(vec![out, inp, k, k], data).unwrap(),
        );
        self.push(group, format!("{name}.bias"), Tensor::zeros(&[out]));
    }

    fn gaussian(&mut self, group: ParamGroup, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(group, name.to_string(), Tensor::new(shape.to_vec(), data).unwrap());
    }

    fn push(&mut self, group: ParamGroup, name: String, value: Tensor) {
        self.params.push(Param { name, group, value });
    }

    fn decoder(&mut self, group: ParamGroup, prefix: &str, cfg: &ModelConfig, out: usize) {
        let d = cfg.feature_dim;
        let a = cfg.aspp_channels;
        for i in 0..cfg.aspp_rates.len() {
            self.conv(group, &format!("{prefix}.aspp{i}"), a, d, 3);
        }
        self.conv(group, &format!("{prefix}.fuse"), a, a * cfg.aspp_rates.len(), 1);
        self.conv(group, &format!("{prefix}.low"), cfg.low_channels, cfg.low_dim(), 1);
        self.conv(
            group,
            &format!("{prefix}.mix"),
            cfg.decoder_channels,
            a + cfg.low_channels,
            3,
        );
        self.conv(group, &format!("{prefix}.head"), out, cfg.decoder_channels, 1);
    }
}

impl Model {
    /// Builds a freshly initialized model. `aux_channels` is the number of
    /// training classes plus one. Attention, auxiliary and low-level
    /// parameters always exist so the layout does not depend on toggles.
    pub fn new(config: &ModelConfig, aux_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if aux_channels < 2 {
            return Err(Error::Config("aux_channels: need at least one training class".into()));
        }
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        };
        let d = config.feature_dim;
        let [c0, c1, c2] = config.encoder_channels;
        let enc = ParamGroup::EncoderAttention;
        b.conv(enc, "enc.conv1", c0, 3, 3);
        b.conv(enc, "enc.conv2", c1, c0, 3);
        b.conv(enc, "enc.conv3", c2, c1, 3);
        b.conv(enc, "enc.conv4", d, c2, 3);
        let std = 1.0 / (d as f64).sqrt();
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            b.gaussian(enc, name, &[d, d], std);
        }
        b.decoder(ParamGroup::Decoder, "dec", config, 2);
        b.decoder(ParamGroup::AuxDecoder, "aux", config, aux_channels);
        b.gaussian(ParamGroup::References, REF_FG, &[d], std);
        b.gaussian(ParamGroup::References, REF_BG, &[d], std);
        let low_std = 1.0 / (config.low_dim() as f64).sqrt();
        b.gaussian(ParamGroup::References, REF_LOW_FG, &[config.low_dim()], low_std);
        b.gaussian(ParamGroup::References, REF_LOW_BG, &[config.low_dim()], low_std);
        Self::from_params(config.clone(), aux_channels, b.params)
    }

    fn from_params(config: ModelConfig, aux_channels: usize, params: Vec<Param>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(Self {
            config,
            aux_channels,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn aux_channels(&self) -> usize {
        self.aux_channels
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn group_members(&self, group: ParamGroup) -> impl Iterator<Item = usize> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == group)
            .map(|(i, _)| i)
    }

    /// Every parameter belongs to exactly one group, and each group is
    /// non-empty.
    pub fn check_partition(&self) -> Result<()> {
        let total: usize = ParamGroup::ALL.iter().map(|&g| self.group_members(g).count()).sum();
        if total != self.params.len() {
            return Err(Error::Checkpoint("parameter groups do not cover every tensor".into()));
        }
        if let Some(g) = ParamGroup::ALL.iter().find(|&&g| self.group_members(g).count() == 0) {
            return Err(Error::Checkpoint(format!("parameter group {g:?} is empty")));
        }
        Ok(())
    }

    /// Current reference vectors (foreground, background).
    pub fn references(&self) -> (&Tensor, &Tensor) {
        (&self.param(REF_FG).unwrap().value, &self.param(REF_BG).unwrap().value)
    }

    /// Hex digest of every parameter value.
    pub fn digest(&self) -> String {
        let values: Vec<(&str, &Tensor)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        crate::config::content_hash(&values)
    }

    /// Puts every parameter on `graph` as a trainable leaf.
    pub fn bind<'g>(&'g self, graph: &'g Graph) -> Bound<'g> {
        self.bind_with(graph, true)
    }

    /// Puts every parameter on `graph` as a constant (inference only).
    pub fn bind_frozen<'g>(&'g self, graph: &'g Graph) -> Bound<'g> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&'g self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.variable(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        Bound {
            model: self,
            graph,
            vars,
        }
    }
}

/// A model whose parameters live on a graph.
pub struct Bound<'g> {
    model: &'g Model,
    graph: &'g Graph,
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn model(&self) -> &'g Model {
        self.model
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var<'g> {
        let i = self
            .model
            .param_index(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    fn conv(&self, x: Var<'g>, name: &str, spec: ConvSpec) -> Result<Var<'g>, TensorError> {
        x.conv2d(
            self.var(&format!("{name}.weight")),
            Some(self.var(&format!("{name}.bias"))),
            spec,
        )
    }

    /// Image `[B, 3, H, W]` to the low-level `[B, d_low, H/4, W/4]` and
    /// high-level `[B, d, H/16, W/16]` features.
    pub fn encode(&self, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::shape("encode", &shape, &[0, 3, 0, 0]).into());
        }
        if !shape[2].is_multiple_of(HIGH_STRIDE)
            || !shape[3].is_multiple_of(HIGH_STRIDE)
            || shape[2] == 0
            || shape[3] == 0
        {
            return Err(TensorError::contract(
                "encode",
                format!(
                    "spatial extent {}x{} is not a multiple of {HIGH_STRIDE}",
                    shape[2], shape[3]
                ),
            )
            .into());
        }
        let down = ConvSpec::new(2, 1, 1);
        let x = self.conv(x, "enc.conv1", down)?.relu();
        let low = self.conv(x, "enc.conv2", down)?.relu();
        let x = self.conv(low, "enc.conv3", down)?.relu();
        let high = self.conv(x, "enc.conv4", down)?.relu();
        Ok((low, high))
    }

    /// Residual multi-head self-attention over the pixels of each image.
    pub fn attend(&self, high: Var<'g>) -> Result<Var<'g>> {
        let shape = high.shape();
        if shape.len() != 4 || shape[1] != self.model.config.feature_dim {
            return Err(TensorError::shape("attend", &shape, &[0, self.model.config.feature_dim, 0, 0]).into());
        }
        let (batch, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let heads = self.model.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (wq, wk, wv, wo) = (
            self.var("attn.wq"),
            self.var("attn.wk"),
            self.var("attn.wv"),
            self.var("attn.wo"),
        );
        let mut outputs = Vec::with_capacity(batch);
        for b in 0..batch {
            let img = high.narrow(0, b, 1)?.reshape(&[d, h * w])?;
            let seq = img.transpose()?; // [hw, d]
            let q = seq.matmul(wq)?;
            let k = seq.matmul(wk)?;
            let v = seq.matmul(wv)?;
            let mut per_head = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        q.narrow(1, hd * dh, dh)?,
                        k.narrow(1, hd * dh, dh)?,
                        v.narrow(1, hd * dh, dh)?,
                    )
                };
                let scores = qh.matmul(kh.transpose()?)?.scale(scale);
                let weights = scores.softmax(1)?;
                per_head.push(weights.matmul(vh)?);
            }
            let merged = if heads == 1 {
                per_head[0]
            } else {
                self.graph.concat(&per_head, 1)?
            };
            let out = merged.matmul(wo)?.add(seq)?;
            outputs.push(out.transpose()?.reshape(&[1, d, h, w])?);
        }
        Ok(if batch == 1 {
            outputs[0]
        } else {
            self.graph.concat(&outputs, 0)?
        })
    }

    fn decoder(&self, prefix: &str, high: Var<'g>, low: Var<'g>) -> Result<Var<'g>> {
        let (hs, ls) = (high.shape(), low.shape());
        if hs.len() != 4 || ls.len() != 4 || hs[0] != ls[0] {
            return Err(TensorError::shape("decode", &hs, &ls).into());
        }
        if ls[2] != hs[2] * (HIGH_STRIDE / LOW_STRIDE) || ls[3] != hs[3] * (HIGH_STRIDE / LOW_STRIDE) {
            return Err(TensorError::shape("decode", &hs, &ls).into());
        }
        let mut branches = Vec::with_capacity(self.model.config.aspp_rates.len());
        for (i, &rate) in self.model.config.aspp_rates.iter().enumerate() {
            branches.push(
                self.conv(high, &format!("{prefix}.aspp{i}"), ConvSpec::new(1, rate, rate))?
                    .relu(),
            );
        }
        let context = if branches.len() == 1 {
            branches[0]
        } else {
            self.graph.concat(&branches, 1)?
        };
        let context = self
            .conv(context, &format!("{prefix}.fuse"), ConvSpec::POINTWISE)?
            .relu();
        let up = context.resize_bilinear(ls[2], ls[3])?;
        let skip = self.conv(low, &format!("{prefix}.low"), ConvSpec::POINTWISE)?.relu();
        let x = self.graph.concat(&[up, skip], 1)?;
        let x = self.conv(x, &format!("{prefix}.mix"), ConvSpec::new(1, 1, 1))?.relu();
        let logits = self.conv(x, &format!("{prefix}.head"), ConvSpec::POINTWISE)?;
        Ok(logits.resize_bilinear(ls[2] * LOW_STRIDE, ls[3] * LOW_STRIDE)?)
    }

    /// Two-channel logits `[B, 2, H, W]`; channel 0 is background.
    pub fn decode(&self, high: Var<'g>, low: Var<'g>) -> Result<Var<'g>> {
        self.decoder("dec", high, low)
    }

    /// Training-class logits `[B, K + 1, H, W]`; channel 0 is background.
    pub fn decode_aux(&self, high: Var<'g>, low: Var<'g>) -> Result<Var<'g>> {
        self.decoder("aux", high, low)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder_channels: [4, 6, 8],
            feature_dim: 8,
            aspp_channels: 4,
            low_channels: 3,
            decoder_channels: 4,
            ..Default::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let m = Model::new(&ModelConfig::default(), 10, 0).unwrap();
        m.check_partition().unwrap();
        assert!(m.params().iter().all(|p| p.value.is_finite()));
    }

    #[test]
    fn encoder_strides() {
        let m = Model::new(&small_config(), 4, 0).unwrap();
        for size in [64, 128] {
            let g = Graph::new();
            let b = m.bind_frozen(&g);
            let (low, high) = b.encode(g.constant(random(&[1, 3, size, size], 1))).unwrap();
            assert_eq!(low.shape(), vec![1, 6, size / 4, size / 4]);
            assert_eq!(high.shape(), vec![1, 8, size / 16, size / 16]);
        }
        let g = Graph::new();
        let b = m.bind_frozen(&g);
        assert!(b.encode(g.constant(random(&[1, 3, 40, 40], 1))).is_err());
    }

    #[test]
    fn high_feature_reaches_input() {
        let m = Model::new(&small_config(), 4, 3).unwrap();
        let g = Graph::new();
        let b = m.bind_frozen(&g);
        let x = g.variable(random(&[1, 3, 32, 32], 2));
        let (_, high) = b.encode(x).unwrap();
        let loss = high.sum();
        let grads = g.backward(loss).unwrap();
        let gx = grads.tensor(x);
        assert!(gx.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn single_pixel_attention() {
        let cfg = small_config();
        let m = Model::new(&cfg, 4, 5).unwrap();
        let g = Graph::new();
        let b = m.bind_frozen(&g);
        let x = random(&[1, 8, 1, 1], 6);
        let out = b.attend(g.constant(x.clone())).unwrap().value();
        let wv = &m.param("attn.wv").unwrap().value;
        let wo = &m.param("attn.wo").unwrap().value;
        for j in 0..8 {
            let mut expected = x.data()[j];
            for a in 0..8 {
                let v_a: f64 = (0..8).map(|i| x.data()[i] * wv.data()[i * 8 + a]).sum();
                expected += v_a * wo.data()[a * 8 + j];
            }
            assert!((out.data()[j] - expected).abs() < 1e-12);
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn dense_attention(x: &Tensor, m: &Model, heads: usize) -> Vec<f64> {
        let s = x.shape();
        let (d, n) = (s[1], s[2] * s[3]);
        let w = |name: &str| m.param(name).unwrap().value.data().to_vec();
        let (wq, wk, wv, wo) = (w("attn.wq"), w("attn.wk"), w("attn.wv"), w("attn.wo"));
        let px = |p: usize, c: usize| x.data()[c * n + p];
        let proj = |wm: &[f64], p: usize, j: usize| (0..d).map(|i| px(p, i) * wm[i * d + j]).sum::<f64>();
        let dh = d / heads;
        let mut merged = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for p in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|q| cols.clone().map(|j| proj(&wq, p, j) * proj(&wk, q, j)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in cols.clone() {
                    merged[p][j] = (0..n).map(|q| e[q] / z * proj(&wv, q, j)).sum();
                }
            }
        }
        let mut out = vec![0.0; d * n];
        for p in 0..n {
            for j in 0..d {
                out[j * n + p] = px(p, j) + (0..d).map(|a| merged[p][a] * wo[a * d + j]).sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn attention_matches_dense_oracle() {
        for heads in [1, 2] {
            let cfg = ModelConfig {
                heads,
                ..small_config()
            };
            let m = Model::new(&cfg, 4, 8).unwrap();
            let x = random(&[1, 8, 2, 2], 9);
            let g = Graph::new();
            let out = m.bind_frozen(&g).attend(g.constant(x.clone())).unwrap().value();
            let oracle = dense_attention(&x, &m, heads);
            for (a, b) in out.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identical_pixels_stay_identical() {
        let m = Model::new(&small_config(), 4, 1).unwrap();
        let pixel = random(&[8], 2);
        let mut data = Vec::new();
        for c in 0..8 {
            data.extend(std::iter::repeat_n(pixel.data()[c], 6));
        }
        let x = Tensor::new(vec![1, 8, 2, 3], data).unwrap();
        let g = Graph::new();
        let out = m.bind_frozen(&g).attend(g.constant(x)).unwrap().value();
        for c in 0..8 {
            let plane = &out.data()[c * 6..(c + 1) * 6];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn decoder_shapes_and_determinism() {
        let m = Model::new(&small_config(), 5, 2).unwrap();
        let run = || {
            let g = Graph::new();
            let b = m.bind_frozen(&g);
            let (low, high) = b.encode(g.constant(random(&[2, 3, 64, 64], 3))).unwrap();
            let logits = b.decode(high, low).unwrap().value();
            let aux = b.decode_aux(high, low).unwrap().value();
            (logits, aux)
        };
        let (a, aux) = run();
        assert_eq!(a.shape(), &[2, 2, 64, 64]);
        assert_eq!(aux.shape(), &[2, 5, 64, 64]);
        assert_eq!(run().0, a);
    }

    #[test]
    fn decoder_rejects_mismatched_batch() {
        let m = Model::new(&small_config(), 4, 2).unwrap();
        let g = Graph::new();
        let b = m.bind_frozen(&g);
        let high = g.constant(random(&[2, 8, 4, 4], 1));
        let low = g.constant(random(&[1, 6, 16, 16], 1));
        assert!(b.decode(high, low).is_err());
    }

    #[test]
    fn aux_gradient_reaches_encoder() {
        let m = Model::new(&small_config(), 4, 4).unwrap();
        let g = Graph::new();
        let b = m.bind(&g);
        let (low, high) = b.encode(g.constant(random(&[1, 3, 32, 32], 5))).unwrap();
        let logits = b.decode_aux(b.attend(high).unwrap(), low).unwrap();
        let loss = logits.softmax_cross_entropy(&vec![1; 32 * 32]).unwrap();
        let grads = g.backward(loss).unwrap();
        let w = grads.tensor(b.var("enc.conv1.weight"));
        assert!(w.data().iter().any(|v| *v != 0.0));
        assert!(grads.get(b.var("dec.head.weight")).is_none());
    }
}
