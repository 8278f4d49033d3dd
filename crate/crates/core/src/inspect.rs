//! Per-sample dump of the gates and the prediction.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{DeltaWeight, FusionState};
use crate::model::Model;
use crate::tensor::norm;

/// Object index with its attention weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedObject {
    pub index: usize,
    pub alpha: f64,
    pub roi_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub id: String,
    pub predicted: String,
    pub gold: Option<String>,
    pub masked_probs: Vec<f64>,
    /// Objects chosen for the object prefix, one per entity.
    pub prefix_objects: (usize, usize),
    /// Absent when fusion is disabled.
    pub fusion: Option<GateDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDump {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub semantic_norm: f64,
    pub uniform_fallback: bool,
    /// Objects by descending weight.
    pub object_ranking: Vec<RankedObject>,
}

fn weighted_norm(delta: &DeltaWeight, v: &[f64]) -> f64 {
    match delta {
        DeltaWeight::Scalar(d) => d * norm(v),
        DeltaWeight::PerDim(d) => norm(&d.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>()),
    }
}

fn gate_dump(state: FusionState, sample: &Sample) -> GateDump {
    let mut object_ranking: Vec<RankedObject> = state
        .alpha
        .iter()
        .enumerate()
        .map(|(index, &alpha)| RankedObject { index, alpha, roi_score: sample.objects[index].roi_score })
        .collect();
    object_ranking.sort_by(|a, b| b.alpha.total_cmp(&a.alpha).then(a.index.cmp(&b.index)));
    GateDump {
        semantic_norm: weighted_norm(&state.delta, &state.h_i2t),
        alpha: state.alpha,
        beta: state.beta,
        gamma: state.gamma,
        uniform_fallback: state.uniform_fallback,
        object_ranking,
    }
}

pub fn inspect_sample(model: &Model, sample: &Sample) -> Result<Inspection> {
    let (prediction, state, prefix_objects) = model.inspect(sample)?;
    Ok(Inspection {
        id: sample.id.clone(),
        predicted: model.schema.relation_name(prediction.predicted).to_string(),
        gold: sample.relation.map(|r| model.schema.relation_name(r).to_string()),
        masked_probs: prediction.masked_probs,
        prefix_objects,
        fusion: state.map(|s| gate_dump(s, sample)),
    })
}

/// Looks `id` up in `samples` and inspects it.
pub fn inspect_by_id<'a>(model: &Model, samples: impl IntoIterator<Item = &'a Sample>, id: &str) -> Result<Inspection> {
    let sample = samples
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::InvalidInput(format!("no sample with id {id:?}")))?;
    inspect_sample(model, sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_dim_delta_scales_each_coordinate() {
        let v = [3.0, 4.0];
        assert_eq!(weighted_norm(&DeltaWeight::Scalar(0.5), &v), 2.5);
        assert_eq!(weighted_norm(&DeltaWeight::PerDim(vec![1.0, 0.0]), &v), 3.0);
    }
}
