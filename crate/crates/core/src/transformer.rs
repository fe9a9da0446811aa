//! Post-norm Transformer encoder-decoder whose decoder layers read their
//! cross-attention sources from an externally composed list.
//!
//! Each encoder layer `i` produces `SA_i = LN(x + SelfAttn(x))` and
//! `FF_i = LN(SA_i + FFN(SA_i))`, with `x = FF_{i-1}` (the embeddings for
//! `i = 1`). All `2M` sub-layer outputs are kept so the composer can mix them.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::composer::{
    collected_ids, CollectMode, CompositionMode, CompositionTable, LayerRange, Sublayer,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    attention_forward, layer_norm_forward, sinusoidal_positions, AttentionLayout, Segments, Tensor,
};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub composition: CompositionMode,
    pub collect: CollectMode,
    /// `None` collects from every encoder layer.
    pub layer_range: Option<LayerRange>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Two-layer, width-8 configuration used by gradient checks.
    pub fn tiny(vocab: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            src_vocab: vocab,
            tgt_vocab: vocab,
            max_len: 32,
            composition: CompositionMode::PerLayer,
            collect: CollectMode::SaAndFf,
            layer_range: None,
            dropout: 0.0,
        }
    }

    pub fn range(&self) -> LayerRange {
        self.layer_range.unwrap_or(LayerRange::all(self.enc_layers))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_model < 2 || self.d_ff == 0 {
            return fail("d_model must be >= 2 and d_ff >= 1".into());
        }
        if self.src_vocab <= EOS || self.tgt_vocab <= EOS {
            return fail("vocabularies must contain pad, bos and eos".into());
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.range().validate(self.enc_layers)?;
        collected_ids(self.enc_layers, self.collect, self.range())?;
        Ok(())
    }

    /// Number of collected representations `C`.
    pub fn collected_count(&self) -> usize {
        collected_ids(self.enc_layers, self.collect, self.range()).map_or(0, |v| v.len())
    }
}

/// Encoder outputs for one source sequence, position-major (`S × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace {
    pub h0: Tensor,
    pub sa: Vec<Tensor>,
    pub ff: Vec<Tensor>,
    /// `true` at padding positions.
    pub src_pad_mask: Vec<bool>,
}

impl EncoderTrace {
    pub fn layers(&self) -> usize {
        self.sa.len()
    }

    pub fn top(&self) -> &Tensor {
        self.ff.last().expect("at least one encoder layer")
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayerIds {
    attn: AttnIds,
    norm1: NormIds,
    ffn: FfnIds,
    norm2: NormIds,
}

#[derive(Clone, Debug)]
struct DecoderLayerIds {
    self_attn: AttnIds,
    norm1: NormIds,
    cross: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
    norm3: NormIds,
}

#[derive(Clone, Debug)]
struct ModelIds {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayerIds>,
    decoder: Vec<DecoderLayerIds>,
    out_w: ParamId,
    out_b: ParamId,
    compose: Option<(ParamId, ParamId)>,
}

pub const COMPOSE_KEYS: &str = "compose.keys";
pub const COMPOSE_VALUES: &str = "compose.values";

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
    positions: Tensor,
}

/// Dropout source for a training forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// Graph handles for an encoded batch.
pub struct EncodedBatch {
    pub h0: Var,
    pub sa: Vec<Var>,
    pub ff: Vec<Var>,
    pub segments: Segments,
    pub key_valid: Vec<bool>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

impl Model {
    /// Random initialization: projections `N(0, 1/d)`, embeddings
    /// `N(0, 1/√d)` (variances), zero biases, unit norm gains, and a uniform
    /// `1/C` composition table.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let proj_std = (1.0 / d as f64).sqrt();
        let embed_std = (1.0 / (d as f64).sqrt()).sqrt();
        let mut store = ParamStore::new();

        let src_embed = store.register("src_embed", init.normal(&[config.src_vocab, d], embed_std));
        let tgt_embed = store.register("tgt_embed", init.normal(&[config.tgt_vocab, d], embed_std));

        let attn = |store: &mut ParamStore, init: &mut Init, p: &str| AttnIds {
            wq: store.register(format!("{p}.wq"), init.normal(&[d, d], proj_std)),
            bq: store.register(format!("{p}.bq"), Tensor::zeros(&[d])),
            wk: store.register(format!("{p}.wk"), init.normal(&[d, d], proj_std)),
            wv: store.register(format!("{p}.wv"), init.normal(&[d, d], proj_std)),
            bv: store.register(format!("{p}.bv"), Tensor::zeros(&[d])),
            wo: store.register(format!("{p}.wo"), init.normal(&[d, d], proj_std)),
            bo: store.register(format!("{p}.bo"), Tensor::zeros(&[d])),
        };
        let norm = |store: &mut ParamStore, p: &str| NormIds {
            gain: store.register(format!("{p}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.register(format!("{p}.bias"), Tensor::zeros(&[d])),
        };
        let ffn = |store: &mut ParamStore, init: &mut Init, p: &str| FfnIds {
            w1: store.register(format!("{p}.w1"), init.normal(&[d, config.d_ff], proj_std)),
            b1: store.register(format!("{p}.b1"), Tensor::zeros(&[config.d_ff])),
            w2: store.register(format!("{p}.w2"), init.normal(&[config.d_ff, d], proj_std)),
            b2: store.register(format!("{p}.b2"), Tensor::zeros(&[d])),
        };

        let mut encoder = Vec::new();
        for i in 1..=config.enc_layers {
            let p = format!("enc{i}");
            encoder.push(EncoderLayerIds {
                attn: attn(&mut store, &mut init, &format!("{p}.attn")),
                norm1: norm(&mut store, &format!("{p}.norm1")),
                ffn: ffn(&mut store, &mut init, &format!("{p}.ffn")),
                norm2: norm(&mut store, &format!("{p}.norm2")),
            });
        }
        let mut decoder = Vec::new();
        for l in 1..=config.dec_layers {
            let p = format!("dec{l}");
            decoder.push(DecoderLayerIds {
                self_attn: attn(&mut store, &mut init, &format!("{p}.self")),
                norm1: norm(&mut store, &format!("{p}.norm1")),
                cross: attn(&mut store, &mut init, &format!("{p}.cross")),
                norm2: norm(&mut store, &format!("{p}.norm2")),
                ffn: ffn(&mut store, &mut init, &format!("{p}.ffn")),
                norm3: norm(&mut store, &format!("{p}.norm3")),
            });
        }
        let out_w = store.register("out.w", init.normal(&[d, config.tgt_vocab], proj_std));
        let out_b = store.register("out.b", Tensor::zeros(&[config.tgt_vocab]));

        let compose = match config.composition {
            CompositionMode::Baseline => None,
            mode => {
                let table = CompositionTable::init(
                    mode,
                    config.enc_layers,
                    config.dec_layers,
                    config.collect,
                    config.range(),
                )?;
                Some((
                    store.register(COMPOSE_KEYS, table.keys),
                    store.register(COMPOSE_VALUES, table.values),
                ))
            }
        };

        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Model {
            ids: ModelIds { src_embed, tgt_embed, encoder, decoder, out_w, out_b, compose },
            config,
            params: store,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn composition_param_ids(&self) -> Option<(ParamId, ParamId)> {
        self.ids.compose
    }

    pub fn composition_table(&self) -> Option<CompositionTable> {
        let (k, v) = self.ids.compose?;
        Some(CompositionTable {
            mode: self.config.composition,
            ids: collected_ids(self.config.enc_layers, self.config.collect, self.config.range())
                .expect("validated"),
            dec_layers: self.config.dec_layers,
            keys: self.params.get(k).clone(),
            values: self.params.get(v).clone(),
        })
    }

    pub fn set_composition_table(&mut self, table: &CompositionTable) -> Result<()> {
        let Some((k, v)) = self.ids.compose else {
            return Err(Error::Config("baseline model has no composition table".into()));
        };
        if table.keys.shape() != self.params.get(k).shape()
            || table.values.shape() != self.params.get(v).shape()
        {
            return Err(Error::Config("composition table shape does not match model".into()));
        }
        *self.params.get_mut(k) = table.keys.clone();
        *self.params.get_mut(v) = table.values.clone();
        Ok(())
    }

    /// Copies every tensor that exists in `other` under the same name and shape.
    pub fn copy_shared_weights(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for (name, t) in other.params.iter() {
            if let Some(id) = self.params.id(name) {
                if self.params.get(id).shape() == t.shape() {
                    *self.params.get_mut(id) = t.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    fn check_tokens(&self, tokens: &[usize], vocab: usize, what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input(format!("empty {what} sequence")));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "{what} length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("{what} token {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    fn positions_for(&self, segs: &Segments) -> Tensor {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(segs.total() * d);
        for s in 0..segs.count() {
            for p in 0..segs.len_of(s) {
                data.extend_from_slice(self.positions.row(p));
            }
        }
        Tensor::new(vec![segs.total(), d], data).expect("positions shape")
    }

    fn dropout(&self, g: &mut Graph, x: Var, drop: &mut Option<Dropout>) -> Result<Var> {
        let Some(dr) = drop else { return Ok(x) };
        if dr.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - dr.rate;
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if dr.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    fn embed(
        &self,
        g: &mut Graph,
        table: ParamId,
        seqs: &[&[usize]],
        drop: &mut Option<Dropout>,
    ) -> Result<(Var, Segments)> {
        let segs = Segments::from_lens(seqs.iter().map(|s| s.len()));
        let flat: Vec<usize> = seqs.concat();
        let t = g.param(table);
        let e = g.embedding(t, &flat)?;
        let pos = g.constant(self.positions_for(&segs));
        let x = g.add(e, pos)?;
        Ok((self.dropout(g, x, drop)?, segs))
    }

    fn attention_block(
        &self,
        g: &mut Graph,
        xq: Var,
        key_src: Var,
        value_src: Var,
        layout: &Rc<AttentionLayout>,
        ids: &AttnIds,
    ) -> Result<Var> {
        let (wq, bq, wk, wv, bv, wo, bo) = (
            g.param(ids.wq),
            g.param(ids.bq),
            g.param(ids.wk),
            g.param(ids.wv),
            g.param(ids.bv),
            g.param(ids.wo),
            g.param(ids.bo),
        );
        let q = g.matmul(xq, wq)?;
        let q = g.add_row(q, bq)?;
        let k = g.matmul(key_src, wk)?;
        let v = g.matmul(value_src, wv)?;
        let v = g.add_row(v, bv)?;
        let o = g.attention(q, k, v, layout.clone())?;
        let o = g.matmul(o, wo)?;
        g.add_row(o, bo)
    }

    fn ffn_block(&self, g: &mut Graph, x: Var, ids: &FfnIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    fn residual_norm(
        &self,
        g: &mut Graph,
        x: Var,
        sub: Var,
        ids: &NormIds,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let sub = self.dropout(g, sub, drop)?;
        let s = g.add(x, sub)?;
        let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
        g.layer_norm(s, gain, bias, LN_EPS)
    }

    /// Encodes a batch of sources packed row-wise.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        srcs: &[&[usize]],
        drop: &mut Option<Dropout>,
    ) -> Result<EncodedBatch> {
        for s in srcs {
            self.check_tokens(s, self.config.src_vocab, "source")?;
            if s.iter().all(|&t| t == PAD) {
                return Err(Error::Input("source consists only of padding".into()));
            }
        }
        let (h0, segments) = self.embed(g, self.ids.src_embed, srcs, drop)?;
        let key_valid: Vec<bool> = srcs.iter().flat_map(|s| s.iter().map(|&t| t != PAD)).collect();
        let layout = Rc::new(AttentionLayout {
            queries: segments.clone(),
            keys: segments.clone(),
            key_valid: key_valid.clone(),
            causal: false,
            heads: self.config.heads,
        });
        let mut x = h0;
        let mut sa = Vec::new();
        let mut ff = Vec::new();
        for ids in &self.ids.encoder {
            let a = self.attention_block(g, x, x, x, &layout, &ids.attn)?;
            let h_sa = self.residual_norm(g, x, a, &ids.norm1, drop)?;
            let f = self.ffn_block(g, h_sa, &ids.ffn)?;
            let h_ff = self.residual_norm(g, h_sa, f, &ids.norm2, drop)?;
            sa.push(h_sa);
            ff.push(h_ff);
            x = h_ff;
        }
        Ok(EncodedBatch { h0, sa, ff, segments, key_valid })
    }

    /// Key and value sources for every decoder layer.
    pub fn sources_graph(&self, g: &mut Graph, enc: &EncodedBatch) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = self.config.dec_layers;
        let Some((kid, vid)) = self.ids.compose else {
            let top = *enc.ff.last().expect("encoder layers");
            return Ok((vec![top; n], vec![top; n]));
        };
        let ids = collected_ids(self.config.enc_layers, self.config.collect, self.config.range())?;
        let reps: Vec<Var> = ids
            .iter()
            .map(|id| match id.sublayer {
                Sublayer::SelfAttention => enc.sa[id.layer - 1],
                Sublayer::FeedForward => enc.ff[id.layer - 1],
            })
            .collect();
        let (kt, vt) = (g.param(kid), g.param(vid));
        match self.config.composition {
            CompositionMode::Shared => {
                let k = g.mix(&reps, kt, 0)?;
                let v = g.mix(&reps, vt, 0)?;
                Ok((vec![k; n], vec![v; n]))
            }
            _ => {
                let mut keys = Vec::with_capacity(n);
                let mut values = Vec::with_capacity(n);
                for l in 0..n {
                    keys.push(g.mix(&reps, kt, l)?);
                    values.push(g.mix(&reps, vt, l)?);
                }
                Ok((keys, values))
            }
        }
    }

    /// Teacher-forced decoder pass; returns `[Σ T_b, tgt_vocab]` logits.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        tgt_in: &[&[usize]],
        keys: &[Var],
        values: &[Var],
        enc: &EncodedBatch,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let n = self.config.dec_layers;
        if keys.len() != n || values.len() != n {
            return Err(Error::Config(format!(
                "decoder has {n} layers but got {} keys and {} values",
                keys.len(),
                values.len()
            )));
        }
        if tgt_in.len() != enc.segments.count() {
            return Err(Error::Shape("source and target batch sizes differ".into()));
        }
        for t in tgt_in {
            self.check_tokens(t, self.config.tgt_vocab, "target")?;
        }
        let (mut y, segs) = self.embed(g, self.ids.tgt_embed, tgt_in, drop)?;
        let self_layout = Rc::new(AttentionLayout {
            queries: segs.clone(),
            keys: segs.clone(),
            key_valid: vec![true; segs.total()],
            causal: true,
            heads: self.config.heads,
        });
        let cross_layout = Rc::new(AttentionLayout {
            queries: segs.clone(),
            keys: enc.segments.clone(),
            key_valid: enc.key_valid.clone(),
            causal: false,
            heads: self.config.heads,
        });
        for (l, ids) in self.ids.decoder.iter().enumerate() {
            let a = self.attention_block(g, y, y, y, &self_layout, &ids.self_attn)?;
            let y1 = self.residual_norm(g, y, a, &ids.norm1, drop)?;
            let c = self.attention_block(g, y1, keys[l], values[l], &cross_layout, &ids.cross)?;
            let y2 = self.residual_norm(g, y1, c, &ids.norm2, drop)?;
            let f = self.ffn_block(g, y2, &ids.ffn)?;
            y = self.residual_norm(g, y2, f, &ids.norm3, drop)?;
        }
        let (w, b) = (g.param(self.ids.out_w), g.param(self.ids.out_b));
        let logits = g.matmul(y, w)?;
        g.add_row(logits, b)
    }

    /// Mean token cross-entropy of a batch of (source, target) pairs.
    ///
    /// The decoder reads `BOS y_1 .. y_T` and predicts `y_1 .. y_T EOS`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        pairs: &[(&[usize], &[usize])],
        smoothing: f64,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
        let tgt_in: Vec<Vec<usize>> =
            pairs.iter().map(|p| std::iter::once(BOS).chain(p.1.iter().copied()).collect()).collect();
        let targets: Vec<usize> =
            pairs.iter().flat_map(|p| p.1.iter().copied().chain(std::iter::once(EOS))).collect();
        let enc = self.encode_graph(g, &srcs, drop)?;
        let (keys, values) = self.sources_graph(g, &enc)?;
        let tgt_refs: Vec<&[usize]> = tgt_in.iter().map(Vec::as_slice).collect();
        let logits = self.decode_graph(g, &tgt_refs, &keys, &values, &enc, drop)?;
        g.cross_entropy(logits, &targets, Some(PAD), smoothing)
    }

    /// Teacher-forced loss of one pair with dropout off.
    pub fn forward_teacher_forced(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        let mut g = Graph::with_params(&self.params);
        let loss = self.loss_graph(&mut g, &[(src, tgt)], 0.0, &mut None)?;
        Ok(g.value(loss).item())
    }

    /// Logits for every position of `tgt_in` (which should start with BOS).
    pub fn teacher_forced_logits(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let enc = self.encode_graph(&mut g, &[src], &mut None)?;
        let (keys, values) = self.sources_graph(&mut g, &enc)?;
        let logits = self.decode_graph(&mut g, &[tgt_in], &keys, &values, &enc, &mut None)?;
        Ok(g.value(logits).clone())
    }

    pub fn encode(&self, src: &[usize]) -> Result<EncoderTrace> {
        let mut g = Graph::with_params(&self.params);
        let enc = self.encode_graph(&mut g, &[src], &mut None)?;
        Ok(EncoderTrace {
            h0: g.value(enc.h0).clone(),
            sa: enc.sa.iter().map(|&v| g.value(v).clone()).collect(),
            ff: enc.ff.iter().map(|&v| g.value(v).clone()).collect(),
            src_pad_mask: src.iter().map(|&t| t == PAD).collect(),
        })
    }

    /// Composed key and value sources per decoder layer for one trace.
    pub fn sources(&self, trace: &EncoderTrace) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let n = self.config.dec_layers;
        match self.composition_table() {
            None => Ok((vec![trace.top().clone(); n], vec![trace.top().clone(); n])),
            Some(table) => {
                let reps = crate::composer::collect(trace, self.config.collect, self.config.range())?;
                let mut keys = Vec::with_capacity(n);
                let mut values = Vec::with_capacity(n);
                for l in 1..=n {
                    let (k, v) = table.compose(&reps, l)?;
                    keys.push(k);
                    values.push(v);
                }
                Ok((keys, values))
            }
        }
    }

    /// Projects per-layer key/value sources through each decoder layer's
    /// cross-attention projections, ready for incremental decoding.
    pub fn cross_memory(
        &self,
        keys: &[Tensor],
        values: &[Tensor],
        src_pad_mask: &[bool],
    ) -> Result<CrossMemory> {
        let n = self.config.dec_layers;
        if keys.len() != n || values.len() != n {
            return Err(Error::Config(format!(
                "decoder has {n} layers but got {} keys and {} values",
                keys.len(),
                values.len()
            )));
        }
        let mut layers = Vec::with_capacity(n);
        for (l, ids) in self.ids.decoder.iter().enumerate() {
            if keys[l].rows() != src_pad_mask.len() || values[l].rows() != src_pad_mask.len() {
                return Err(Error::Shape("source length disagrees with padding mask".into()));
            }
            let k = keys[l].matmul(self.params.get(ids.cross.wk))?;
            let v = add_bias(values[l].matmul(self.params.get(ids.cross.wv))?, self.params.get(ids.cross.bv));
            layers.push((k, v));
        }
        Ok(CrossMemory { layers, key_valid: src_pad_mask.iter().map(|&p| !p).collect() })
    }

    /// Encodes `src` and prepares the decoder's cross-attention memory.
    pub fn prepare(&self, src: &[usize]) -> Result<CrossMemory> {
        let trace = self.encode(src)?;
        let (k, v) = self.sources(&trace)?;
        self.cross_memory(&k, &v, &trace.src_pad_mask)
    }

    pub fn start_state(&self) -> DecoderState {
        let n = self.config.dec_layers;
        DecoderState {
            prefix: Vec::new(),
            self_keys: vec![Vec::new(); n],
            self_values: vec![Vec::new(); n],
            width: self.config.d_model,
        }
    }

    /// Feeds `token` at the next position and returns next-token logits.
    pub fn decode_step(&self, state: &mut DecoderState, memory: &CrossMemory, token: usize) -> Result<Vec<f64>> {
        let d = self.config.d_model;
        let pos = state.prefix.len();
        if pos >= self.config.max_len {
            return Err(Error::Input(format!("decoder position {pos} beyond max_len")));
        }
        if token >= self.config.tgt_vocab {
            return Err(Error::Index(format!("target token {token} outside vocabulary")));
        }
        if memory.layers.len() != self.config.dec_layers {
            return Err(Error::Config("cross memory does not match decoder depth".into()));
        }
        let p = &self.params;
        let mut y: Vec<f64> = p
            .get(self.ids.tgt_embed)
            .row(token)
            .iter()
            .zip(self.positions.row(pos))
            .map(|(e, q)| e + q)
            .collect();
        state.prefix.push(token);
        let t = state.prefix.len();
        for (l, ids) in self.ids.decoder.iter().enumerate() {
            let a = &ids.self_attn;
            let yt = row_tensor(&y);
            let q = add_bias(yt.matmul(p.get(a.wq))?, p.get(a.bq));
            let k = yt.matmul(p.get(a.wk))?;
            let v = add_bias(yt.matmul(p.get(a.wv))?, p.get(a.bv));
            state.self_keys[l].extend_from_slice(k.data());
            state.self_values[l].extend_from_slice(v.data());
            let layout = AttentionLayout {
                queries: Segments::from_lens([1]),
                keys: Segments::from_lens([t]),
                key_valid: vec![true; t],
                causal: false,
                heads: self.config.heads,
            };
            let (o, _) =
                attention_forward(q.data(), &state.self_keys[l], &state.self_values[l], d, &layout);
            let o = add_bias(row_tensor(&o).matmul(p.get(a.wo))?, p.get(a.bo));
            let y1 = self.norm_eager(&y, o.data(), &ids.norm1);

            let c = &ids.cross;
            let (mk, mv) = &memory.layers[l];
            let q = add_bias(row_tensor(&y1).matmul(p.get(c.wq))?, p.get(c.bq));
            let layout = AttentionLayout {
                queries: Segments::from_lens([1]),
                keys: Segments::from_lens([mk.rows()]),
                key_valid: memory.key_valid.clone(),
                causal: false,
                heads: self.config.heads,
            };
            let (o, _) = attention_forward(q.data(), mk.data(), mv.data(), d, &layout);
            let o = add_bias(row_tensor(&o).matmul(p.get(c.wo))?, p.get(c.bo));
            let y2 = self.norm_eager(&y1, o.data(), &ids.norm2);

            let f = &ids.ffn;
            let h = add_bias(row_tensor(&y2).matmul(p.get(f.w1))?, p.get(f.b1)).map(|x| x.max(0.0));
            let o = add_bias(h.matmul(p.get(f.w2))?, p.get(f.b2));
            y = self.norm_eager(&y2, o.data(), &ids.norm3);
        }
        let logits = add_bias(row_tensor(&y).matmul(p.get(self.ids.out_w))?, p.get(self.ids.out_b));
        Ok(logits.into_data())
    }

    fn norm_eager(&self, x: &[f64], sub: &[f64], ids: &NormIds) -> Vec<f64> {
        let s: Vec<f64> = x.iter().zip(sub).map(|(a, b)| a + b).collect();
        let (y, _, _) = layer_norm_forward(
            &s,
            s.len(),
            self.params.get(ids.gain).data(),
            self.params.get(ids.bias).data(),
            LN_EPS,
        );
        y
    }
}

fn row_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("nonempty row")
}

fn add_bias(mut x: Tensor, b: &Tensor) -> Tensor {
    let c = x.cols();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % c];
    }
    x
}

/// Projected cross-attention keys and values for each decoder layer.
#[derive(Clone, Debug)]
pub struct CrossMemory {
    layers: Vec<(Tensor, Tensor)>,
    key_valid: Vec<bool>,
}

/// Incremental decoding state: the fed prefix and per-layer self-attention
/// caches holding one projected key/value row per prefix position.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub prefix: Vec<usize>,
    self_keys: Vec<Vec<f64>>,
    self_values: Vec<Vec<f64>>,
    width: usize,
}

impl DecoderState {
    /// Cached positions in decoder layer `layer` (0-based).
    pub fn cache_len(&self, layer: usize) -> usize {
        self.self_keys[layer].len() / self.width
    }
}
