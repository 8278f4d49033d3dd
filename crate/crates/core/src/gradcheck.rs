//! Finite-difference check of the analytic gradients.
//!
//! A toy model is built in 64-bit floats with dropout off. Each loss term is
//! isolated by giving it the only non-zero weight, and every trainable
//! parameter group is compared against central differences on a seeded
//! sample of coordinates.

use std::time::{Duration, Instant};

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{generate_synthetic, Sample, SyntheticSpec};
use crate::encoder::BackboneConfig;
use crate::error::Result;
use crate::model::{InputDims, Model};
use crate::objectives::{LossReport, LossWeights};
use crate::params::{ParamGroup, ParamId};
use crate::train::{TrainConfig, Trainer};

/// Dimensions and tolerances of a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub model_dim: usize,
    pub k_objects: usize,
    pub image_blocks: usize,
    pub batch_size: usize,
    pub prefix_len: usize,
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Coordinates checked per tensor (all of them for smaller tensors).
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model_dim: 16,
            k_objects: 3,
            image_blocks: 2,
            batch_size: 4,
            prefix_len: 3,
            step: 1e-6,
            floor: 1e-4,
            coords_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Consistency,
    SelfIdentification,
    Classification,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::Consistency, LossTerm::SelfIdentification, LossTerm::Classification];

    pub fn label(self) -> &'static str {
        match self {
            LossTerm::Consistency => "L_d",
            LossTerm::SelfIdentification => "L_s",
            LossTerm::Classification => "L_c",
        }
    }

    fn weights(self, base: LossWeights) -> LossWeights {
        let one = |t| if t == self { 1.0 } else { 0.0 };
        LossWeights {
            lambda_d: one(LossTerm::Consistency),
            lambda_s: one(LossTerm::SelfIdentification),
            lambda_c: one(LossTerm::Classification),
            ..base
        }
    }

    fn value(self, r: &LossReport) -> f64 {
        match self {
            LossTerm::Consistency => r.l_d,
            LossTerm::SelfIdentification => r.l_s,
            LossTerm::Classification => r.l_c,
        }
    }
}

/// Result for one (loss term, parameter group) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub term: LossTerm,
    pub group: ParamGroup,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub groups: Vec<GroupCheck>,
    /// Largest absolute gradient accumulated on frozen parameters (expected exactly 0).
    pub frozen_grad_max: f64,
    pub frozen_params: usize,
    pub runtime: Duration,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol && self.frozen_grad_max == 0.0
    }

    /// TSV table, one row per checked pair plus the frozen backbone row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("loss\tgroup\tcoords\tmax_rel_error\tmax_abs_grad\n");
        for g in &self.groups {
            out += &format!(
                "{}\t{}\t{}\t{:.3e}\t{:.3e}\n",
                g.term.label(),
                g.group.as_str(),
                g.coords,
                g.max_rel_error,
                g.max_abs_grad
            );
        }
        out += &format!(
            "all\t{}\t{}\tno gradient expected\t{:.3e}\n",
            ParamGroup::Backbone.as_str(),
            self.frozen_params,
            self.frozen_grad_max
        );
        out
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds the toy model and batch used by [`run`].
pub fn toy_setup(config: &GradCheckConfig) -> Result<(Model, TrainConfig, Vec<Sample>)> {
    let spec = SyntheticSpec {
        n_samples: config.batch_size,
        vocab_size: 30,
        n_types: 2,
        n_relations: 4,
        relations_per_pair: 1,
        k_objects: config.k_objects,
        image_blocks: config.image_blocks,
        raw_object_dim: 6,
        raw_image_dim: 6,
        min_text_len: 4,
        max_text_len: 6,
        seed: config.seed,
        splits: None,
        ..Default::default()
    };
    let data = generate_synthetic(&spec)?;
    let train = TrainConfig {
        backbone: BackboneConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: config.model_dim,
            ffn_dim: 2 * config.model_dim,
            max_positions: 64,
            dropout: 0.0,
        },
        prefix_len: config.prefix_len,
        max_text_len: spec.max_text_len,
        max_objects: config.k_objects,
        batch_size: config.batch_size,
        seed: config.seed,
        ..Default::default()
    };
    let samples = data.dataset.samples;
    let dims = InputDims::from_sample(&samples[0], data.vocab.len());
    let mut model = Model::new(&train.model_config(), data.dataset.schema.clone(), dims, config.seed)?;

    // Zero-initialized tensors would make every upstream gradient vanish.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let normal = Normal::new(0.0, 0.3).expect("valid std");
    let zeroed: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable && p.value.data().iter().all(|&v| v == 0.0))
        .map(|(id, _)| id)
        .collect();
    for id in zeroed {
        model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    Ok((model, train, samples))
}

/// Runs the full check.
pub fn run(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let (model, train_cfg, samples) = toy_setup(config)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut groups = Vec::new();
    let mut frozen_grad_max: f64 = 0.0;
    let frozen: Vec<ParamId> = model.store.iter().filter(|(_, p)| !p.trainable).map(|(id, _)| id).collect();

    for term in LossTerm::ALL {
        let mut cfg = train_cfg.clone();
        cfg.loss = term.weights(cfg.loss);
        let mut trainer = Trainer::new(cfg, model.clone())?;
        let (_, grads) = trainer.batch_gradients(&batch, false)?;
        for &id in &frozen {
            if let Some(g) = grads.get(id) {
                frozen_grad_max = frozen_grad_max.max(g.max_abs());
            }
        }
        for group in ParamGroup::ALL.into_iter().filter(|&g| g != ParamGroup::Backbone) {
            let ids: Vec<ParamId> = trainer.model.store.group_ids(group).into_iter().filter(|&id| trainer.model.store.get(id).trainable).collect();
            if ids.is_empty() {
                continue;
            }
            let mut check = GroupCheck { term, group, coords: 0, max_rel_error: 0.0, max_abs_grad: 0.0 };
            for id in ids {
                let len = trainer.model.store.value(id).len();
                let coords = (0..len).choose_multiple(&mut rng, config.coords_per_tensor.min(len));
                for c in coords {
                    let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
                    let original = trainer.model.store.value(id).data()[c];
                    let eval = |x: f64, t: &mut Trainer| -> Result<f64> {
                        t.model.store.value_mut(id).data_mut()[c] = x;
                        Ok(term.value(&t.batch_loss(&batch, false)?))
                    };
                    let plus = eval(original + config.step, &mut trainer)?;
                    let minus = eval(original - config.step, &mut trainer)?;
                    trainer.model.store.value_mut(id).data_mut()[c] = original;
                    let numeric = (plus - minus) / (2.0 * config.step);
                    check.coords += 1;
                    check.max_abs_grad = check.max_abs_grad.max(analytic.abs());
                    check.max_rel_error = check.max_rel_error.max(relative_error(analytic, numeric, config.floor));
                }
            }
            groups.push(check);
        }
    }
    Ok(GradCheckReport {
        config: config.clone(),
        groups,
        frozen_grad_max,
        frozen_params: frozen.len(),
        runtime: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_for_tiny_gradients() {
        assert_eq!(relative_error(1.0, 1.0, 1e-4), 0.0);
        assert!((relative_error(2e-9, 1e-9, 1e-4) - 1e-5).abs() < 1e-15);
        assert!((relative_error(1.0, 0.5, 1e-4) - 0.5).abs() < 1e-15);
    }
}
