//! Pre-norm causal transformer layers with an explicit per-layer key/value cache.
//!
//! Inputs are pushed through the stack one segment at a time. Each layer
//! appends the segment's keys and values to its cache and attends over
//! everything cached so far, so feeding segments one after another is
//! identical to one causal pass over their concatenation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Model width N.
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 2, model_dim: 64, ffn_dim: 128, max_positions: 256, dropout: 0.6 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::InvalidConfig("n_layers, ffn_dim and max_positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub n_heads: usize,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        ffn: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut add = |name: &str, r: usize, c: usize, init: Init| store.add(format!("{prefix}.{name}"), group, r, c, init, rng);
        let out_std = 1.0 / (dim as f64).sqrt();
        Self {
            ln1_gain: add("ln1.gain", 1, dim, Init::Ones),
            ln1_bias: add("ln1.bias", 1, dim, Init::Zeros),
            w_q: add("attn.w_q", dim, dim, Init::FanIn),
            b_q: add("attn.b_q", 1, dim, Init::Zeros),
            w_k: add("attn.w_k", dim, dim, Init::FanIn),
            b_k: add("attn.b_k", 1, dim, Init::Zeros),
            w_v: add("attn.w_v", dim, dim, Init::FanIn),
            b_v: add("attn.b_v", 1, dim, Init::Zeros),
            w_o: add("attn.w_o", dim, dim, Init::Normal(out_std)),
            b_o: add("attn.b_o", 1, dim, Init::Zeros),
            ln2_gain: add("ln2.gain", 1, dim, Init::Ones),
            ln2_bias: add("ln2.bias", 1, dim, Init::Zeros),
            w_ff1: add("ffn.w1", dim, ffn, Init::FanIn),
            b_ff1: add("ffn.b1", 1, ffn, Init::Zeros),
            w_ff2: add("ffn.w2", ffn, dim, Init::Normal(1.0 / (ffn as f64).sqrt())),
            b_ff2: add("ffn.b2", 1, dim, Init::Zeros),
            n_heads,
        }
    }

    fn linear(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Keys and values for `x` without computing the block output.
    pub fn keys_values(&self, g: &mut Graph<'_>, x: Var) -> (Var, Var) {
        let (gain, bias) = (g.param(self.ln1_gain), g.param(self.ln1_bias));
        let h = g.layer_norm(x, gain, bias);
        (Self::linear(g, h, self.w_k, self.b_k), Self::linear(g, h, self.w_v, self.b_v))
    }

    /// Runs new rows through the block, extending `cache`. `kv_delta` is added
    /// to the new rows' keys and values (deep prefix vectors).
    pub fn step(&self, g: &mut Graph<'_>, x: Var, cache: &mut LayerCache, kv_delta: Option<(Var, Var)>) -> Var {
        let (gain, bias) = (g.param(self.ln1_gain), g.param(self.ln1_bias));
        let h = g.layer_norm(x, gain, bias);
        let q = Self::linear(g, h, self.w_q, self.b_q);
        let mut k = Self::linear(g, h, self.w_k, self.b_k);
        let mut v = Self::linear(g, h, self.w_v, self.b_v);
        if let Some((dk, dv)) = kv_delta {
            k = g.add(k, dk);
            v = g.add(v, dv);
        }
        let offset = cache.len;
        cache.append(g, k, v);
        let (ck, cv) = cache.kv().expect("cache populated");
        let attn = g.attention(q, ck, cv, self.n_heads, offset);
        let proj = Self::linear(g, attn, self.w_o, self.b_o);
        let x = g.add(x, proj);

        let (gain, bias) = (g.param(self.ln2_gain), g.param(self.ln2_bias));
        let h = g.layer_norm(x, gain, bias);
        let ff = Self::linear(g, h, self.w_ff1, self.b_ff1);
        let ff = g.gelu(ff);
        let ff = Self::linear(g, ff, self.w_ff2, self.b_ff2);
        g.add(x, ff)
    }
}

/// Keys and values seen so far by one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    keys: Option<Var>,
    values: Option<Var>,
    pub len: usize,
}

impl LayerCache {
    pub fn from_kv(g: &Graph<'_>, k: Var, v: Var) -> Self {
        let len = g.value(k).rows();
        Self { keys: Some(k), values: Some(v), len }
    }

    pub fn append(&mut self, g: &mut Graph<'_>, k: Var, v: Var) {
        let n = g.value(k).rows();
        match (self.keys, self.values) {
            (Some(ck), Some(cv)) => {
                self.keys = Some(g.concat_rows(&[ck, k]));
                self.values = Some(g.concat_rows(&[cv, v]));
            }
            _ => {
                self.keys = Some(k);
                self.values = Some(v);
            }
        }
        self.len += n;
    }

    pub fn kv(&self) -> Option<(Var, Var)> {
        Some((self.keys?, self.values?))
    }
}

/// The frozen transformer: learned positions, a block stack, and a final norm.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let n = config.model_dim;
        let positions = store.add("backbone.positions", ParamGroup::Backbone, config.max_positions, n, Init::Normal(0.1), rng);
        let blocks = (0..config.n_layers)
            .map(|l| {
                Block::new(store, &format!("backbone.layer{l}"), ParamGroup::Backbone, n, config.ffn_dim, config.n_heads, rng)
            })
            .collect();
        let final_gain = store.add("backbone.ln_f.gain", ParamGroup::Backbone, 1, n, Init::Ones, rng);
        let final_bias = store.add("backbone.ln_f.bias", ParamGroup::Backbone, 1, n, Init::Zeros, rng);
        Self { config: config.clone(), positions, blocks, final_gain, final_bias }
    }

    pub fn new_state(&self) -> StackState {
        StackState { caches: vec![LayerCache::default(); self.blocks.len()], pos: 0 }
    }

    /// Positional rows for absolute positions `start..start + len`.
    pub fn positions(&self, g: &mut Graph<'_>, start: usize, len: usize) -> Result<Var> {
        if start + len > self.config.max_positions {
            return Err(Error::SequenceTooLong { len: start + len, max: self.config.max_positions });
        }
        let table = g.param(self.positions);
        Ok(g.slice_rows(table, start, len))
    }

    /// Feeds one segment of embeddings through every layer and returns the
    /// final-normed states. `kv_deltas`, when given, holds one key/value delta
    /// pair per layer.
    pub fn feed(
        &self,
        g: &mut Graph<'_>,
        state: &mut StackState,
        embeddings: Var,
        kv_deltas: Option<&[(Var, Var)]>,
    ) -> Result<SegmentStates> {
        let len = g.value(embeddings).rows();
        let pos = self.positions(g, state.pos, len)?;
        let mut x = g.add(embeddings, pos);
        let mut layer_kv = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let delta = kv_deltas.map(|d| d[l]);
            let before = state.caches[l].len;
            x = block.step(g, x, &mut state.caches[l], delta);
            let (ck, cv) = state.caches[l].kv().expect("cache populated");
            let k = g.slice_rows(ck, before, len);
            let v = g.slice_rows(cv, before, len);
            layer_kv.push((k, v));
        }
        let (gain, bias) = (g.param(self.final_gain), g.param(self.final_bias));
        let states = g.layer_norm(x, gain, bias);
        let start = state.pos;
        state.pos += len;
        Ok(SegmentStates { states, start, layer_kv })
    }
}

/// Cache and next free position of a running stack.
#[derive(Debug, Clone)]
pub struct StackState {
    pub caches: Vec<LayerCache>,
    pub pos: usize,
}

/// Output of feeding one segment.
#[derive(Debug, Clone)]
pub struct SegmentStates {
    /// `len x N` final-layer states.
    pub states: Var,
    /// Absolute position of the first row.
    pub start: usize,
    /// The segment's keys and values at every layer.
    pub layer_kv: Vec<(Var, Var)>,
}
