//! Type-conditioned relation decoding.
//!
//! The head and tail type embeddings are appended one after the other behind
//! the encoded sequence and run through one trainable causal layer. The state
//! at the last position feeds a relation head whose logits are masked to the
//! relations compatible with the type pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::data::RelationSchema;
use crate::encoder::{Backbone, Block, EncoderOutputs, LayerCache};
use crate::error::{Error, Result};
use crate::fusion::Affine;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

/// Logit given to type-incompatible relations; its softmax weight underflows to 0.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct DecoderParameters {
    pub type_embedding: ParamId,
    pub block: Block,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub relation_head: Affine,
}

impl DecoderParameters {
    pub fn new(
        store: &mut ParamStore,
        n_types: usize,
        n_relations: usize,
        dim: usize,
        ffn_dim: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let group = ParamGroup::Decoder;
        Self {
            type_embedding: store.add("decoder.type_embedding", group, n_types, dim, Init::Normal(1.0), rng),
            block: Block::new(store, "decoder.layer", group, dim, ffn_dim, n_heads, rng),
            final_gain: store.add("decoder.ln_f.gain", group, 1, dim, Init::Ones, rng),
            final_bias: store.add("decoder.ln_f.bias", group, 1, dim, Init::Zeros, rng),
            relation_head: Affine::new(store, "decoder.relation_head", group, (dim, n_relations), Init::Zeros, rng),
        }
    }

    pub fn num_types(&self, store: &ParamStore) -> usize {
        store.value(self.type_embedding).rows()
    }
}

/// Output states of the two type positions.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub head_type_state: Var,
    pub tail_type_state: Var,
    /// State at the final position, `1 x N`.
    pub relation_rep: Var,
}

/// Appends the type tokens to the encoded sequence and decodes them. When
/// `fused` is given it replaces the pooled text row first.
pub fn decode(
    g: &mut Graph<'_>,
    params: &DecoderParameters,
    backbone: &Backbone,
    encoded: &EncoderOutputs,
    head_type: usize,
    tail_type: usize,
    fused: Option<Var>,
) -> Result<DecoderVars> {
    let n_types = params.num_types(g.store());
    for t in [head_type, tail_type] {
        if t >= n_types {
            return Err(Error::InvalidInput(format!("entity type id {t} outside {n_types} types")));
        }
    }
    let seq = encoded.sequence;
    let len = g.value(seq).rows();
    let context = match fused {
        None => seq,
        Some(f) => {
            let p = encoded.pooled_row;
            let mut parts = Vec::with_capacity(3);
            if p > 0 {
                parts.push(g.slice_rows(seq, 0, p));
            }
            parts.push(f);
            if p + 1 < len {
                parts.push(g.slice_rows(seq, p + 1, len - p - 1));
            }
            g.concat_rows(&parts)
        }
    };

    let (k, v) = params.block.keys_values(g, context);
    let mut cache = LayerCache::from_kv(g, k, v);
    let table = g.param(params.type_embedding);
    let types = g.gather_rows(table, &[head_type, tail_type]);
    let pos = backbone.positions(g, len, 2)?;
    let x = g.add(types, pos);
    let out = params.block.step(g, x, &mut cache, None);
    let (gain, bias) = (g.param(params.final_gain), g.param(params.final_bias));
    let states = g.layer_norm(out, gain, bias);
    let head_type_state = g.row(states, 0);
    let tail_type_state = g.row(states, 1);
    Ok(DecoderVars { head_type_state, tail_type_state, relation_rep: tail_type_state })
}

/// Graph handles of a masked relation distribution.
#[derive(Debug, Clone, Copy)]
pub struct RelationVars {
    pub logits: Var,
    pub probs: Var,
}

/// Relation logits from `relation_rep`, masked to `allowed` and normalized.
pub fn relation_distribution(g: &mut Graph<'_>, params: &DecoderParameters, relation_rep: Var, allowed: &[bool]) -> Result<RelationVars> {
    if !allowed.iter().any(|&a| a) {
        return Err(Error::InvalidInput("every relation is masked for this type pair".into()));
    }
    let logits = params.relation_head.apply(g, relation_rep);
    if g.value(logits).cols() != allowed.len() {
        return Err(Error::SchemaMismatch(format!(
            "relation head has {} outputs, schema has {} relations",
            g.value(logits).cols(),
            allowed.len()
        )));
    }
    let masked = g.mask_fill(logits, allowed, MASKED_LOGIT);
    let probs = g.softmax(masked);
    Ok(RelationVars { logits, probs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPrediction {
    pub logits: Vec<f64>,
    pub masked_probs: Vec<f64>,
    pub predicted: usize,
    /// Output states of the head and tail type positions.
    pub type_reps: [Vec<f64>; 2],
}

impl RelationPrediction {
    /// Masks `logits` with the type pair's compatible relations and picks the argmax.
    pub fn from_logits(
        logits: Vec<f64>,
        schema: &RelationSchema,
        head_type: usize,
        tail_type: usize,
        type_reps: [Vec<f64>; 2],
    ) -> Result<Self> {
        if logits.len() != schema.num_relations() {
            return Err(Error::SchemaMismatch(format!(
                "{} logits for {} relations",
                logits.len(),
                schema.num_relations()
            )));
        }
        if head_type >= schema.num_types() || tail_type >= schema.num_types() {
            return Err(Error::InvalidInput(format!("type pair ({head_type}, {tail_type}) outside schema")));
        }
        let allowed = schema.allowed(head_type, tail_type);
        let mut masked_probs: Vec<f64> =
            logits.iter().zip(allowed).map(|(&l, &ok)| if ok { l } else { MASKED_LOGIT }).collect();
        softmax_in_place(&mut masked_probs);
        let predicted = argmax(&masked_probs);
        Ok(Self { logits, masked_probs, predicted, type_reps })
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Masked prediction for a single relation representation.
pub fn predict_relation(
    g: &mut Graph<'_>,
    params: &DecoderParameters,
    decoded: &DecoderVars,
    schema: &RelationSchema,
    head_type: usize,
    tail_type: usize,
) -> Result<RelationPrediction> {
    let logits = params.relation_head.apply(g, decoded.relation_rep);
    let type_reps = [g.value(decoded.head_type_state).data().to_vec(), g.value(decoded.tail_type_state).data().to_vec()];
    RelationPrediction::from_logits(g.value(logits).data().to_vec(), schema, head_type, tail_type, type_reps)
}
