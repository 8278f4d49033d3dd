//! Input projections and the two task prefixes.
//!
//! Each prefix is a template of `prefix_len` token embeddings modelled on
//! "Consider <slot>, predict relation." with the two slot rows (positions 1
//! and 2) filled per sample: the object prefix takes the two entity-relevant
//! object embeddings, the entity prefix takes the two entity embeddings. On top
//! of the template, every layer owns trainable key and value vectors that are
//! added to the prefix rows' keys and values.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data::Span;
use crate::error::{Error, Result};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::cosine;

/// Row index of the first slot inside a prefix template.
pub const SLOT_START: usize = 1;
pub const MIN_PREFIX_LEN: usize = 3;

/// Trainable maps from raw inputs to width N.
#[derive(Debug, Clone)]
pub struct FeatureProjections {
    pub token_embedding: ParamId,
    pub text_w: ParamId,
    pub text_b: ParamId,
    pub image_w: ParamId,
    pub image_b: ParamId,
    pub object_w: ParamId,
    pub object_b: ParamId,
}

impl FeatureProjections {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        raw_image_dim: usize,
        raw_object_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let group = ParamGroup::Projections;
        Self {
            token_embedding: store.add("proj.token_embedding", group, vocab_size, dim, Init::Normal(1.0), rng),
            text_w: store.add("proj.text.w", group, dim, dim, Init::FanIn, rng),
            text_b: store.add("proj.text.b", group, 1, dim, Init::Zeros, rng),
            image_w: store.add("proj.image.w", group, raw_image_dim, dim, Init::Normal(1.0), rng),
            image_b: store.add("proj.image.b", group, 1, dim, Init::Zeros, rng),
            object_w: store.add("proj.object.w", group, raw_object_dim, dim, Init::Normal(1.0), rng),
            object_b: store.add("proj.object.b", group, 1, dim, Init::Zeros, rng),
        }
    }

    fn affine(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// `L x N` text representation of token ids.
    pub fn text(&self, g: &mut Graph<'_>, tokens: &[u32]) -> Result<Var> {
        let table = g.param(self.token_embedding);
        let vocab = g.value(table).rows();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let words = g.gather_rows(table, &ids);
        Ok(Self::affine(g, words, self.text_w, self.text_b))
    }

    /// `M x N` image blocks.
    pub fn image(&self, g: &mut Graph<'_>, raw: Var) -> Var {
        Self::affine(g, raw, self.image_w, self.image_b)
    }

    /// `K x N` objects.
    pub fn objects(&self, g: &mut Graph<'_>, raw: Var) -> Var {
        Self::affine(g, raw, self.object_w, self.object_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixKind {
    Object,
    Entity,
}

/// Template and per-layer key/value vectors of one prefix.
#[derive(Debug, Clone)]
pub struct PrefixTemplate {
    pub template: ParamId,
    /// `(key, value)` per backbone layer, each `prefix_len x N`.
    pub layer_kv: Vec<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct PrefixParameters {
    pub object: PrefixTemplate,
    pub entity: PrefixTemplate,
    pub prefix_len: usize,
}

impl PrefixParameters {
    pub fn new(store: &mut ParamStore, prefix_len: usize, n_layers: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut make = |name: &str| {
            let group = ParamGroup::Prefixes;
            let template = store.add(format!("prefix.{name}.template"), group, prefix_len, dim, Init::Normal(1.0), rng);
            let layer_kv = (0..n_layers)
                .map(|l| {
                    (
                        store.add(format!("prefix.{name}.layer{l}.key"), group, prefix_len, dim, Init::Normal(0.1), rng),
                        store.add(format!("prefix.{name}.layer{l}.value"), group, prefix_len, dim, Init::Normal(0.1), rng),
                    )
                })
                .collect();
            PrefixTemplate { template, layer_kv }
        };
        let object = make("object");
        let entity = make("entity");
        Self { object, entity, prefix_len }
    }

    pub fn get(&self, kind: PrefixKind) -> &PrefixTemplate {
        match kind {
            PrefixKind::Object => &self.object,
            PrefixKind::Entity => &self.entity,
        }
    }
}

/// A prefix instantiated for one sample.
#[derive(Debug, Clone)]
pub struct PrefixBlock {
    pub kind: PrefixKind,
    /// `prefix_len x N` input rows.
    pub rows: Var,
    /// Per-layer key/value vectors.
    pub layer_kv: Vec<(Var, Var)>,
}

fn fill_slots(g: &mut Graph<'_>, params: &PrefixParameters, kind: PrefixKind, a: Var, b: Var) -> PrefixBlock {
    let tpl = params.get(kind);
    let template = g.param(tpl.template);
    let head = g.slice_rows(template, 0, SLOT_START);
    let tail_start = SLOT_START + 2;
    let tail = g.slice_rows(template, tail_start, params.prefix_len - tail_start);
    let rows = g.concat_rows(&[head, a, b, tail]);
    let layer_kv = tpl.layer_kv.iter().map(|&(k, v)| (g.param(k), g.param(v))).collect();
    PrefixBlock { kind, rows, layer_kv }
}

/// Object prefix with `o_e1`, `o_e2` at the slot.
pub fn build_object_prefix(g: &mut Graph<'_>, params: &PrefixParameters, o_e1: Var, o_e2: Var) -> PrefixBlock {
    fill_slots(g, params, PrefixKind::Object, o_e1, o_e2)
}

/// Entity prefix with the two entity embeddings at the slot.
pub fn build_entity_prefix(g: &mut Graph<'_>, params: &PrefixParameters, e1: Var, e2: Var) -> PrefixBlock {
    fill_slots(g, params, PrefixKind::Entity, e1, e2)
}

/// Mean of the text rows covered by `span`.
pub fn entity_embedding(g: &mut Graph<'_>, text: Var, span: Span) -> Result<Var> {
    let len = g.value(text).rows();
    if span.is_empty() || span.end >= len {
        return Err(Error::InvalidInput(format!("entity span [{}, {}] invalid for {len} tokens", span.start, span.end)));
    }
    let rows = g.slice_rows(text, span.start, span.len());
    Ok(g.mean_rows(rows))
}

/// Index of the object row with the highest cosine similarity to `entity`;
/// ties and undefined similarities resolve to the smallest index.
pub fn most_relevant_object(g: &Graph<'_>, objects: Var, entity: Var) -> Result<usize> {
    let o = g.value(objects);
    if o.rows() == 0 {
        return Err(Error::InvalidInput("no objects in sample".into()));
    }
    let e = g.value(entity);
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for k in 0..o.rows() {
        let sim = cosine(o.row(k), e.data()).unwrap_or(f64::NEG_INFINITY);
        if sim > best_sim {
            best = k;
            best_sim = sim;
        }
    }
    Ok(best)
}
