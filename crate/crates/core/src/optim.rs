//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled to at most this global norm; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

/// Summary of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, first: vec![None; store.len()], second: vec![None; store.len()] })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies `grads` to the trainable parameters of `store` with learning rate `lr`.
    /// Frozen parameters are never written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut ParamGrads, lr: f64) -> StepInfo {
        let c = self.config;
        let grad_norm = grads.global_norm();
        let clipped = c.clip_norm > 0.0 && grad_norm > c.clip_norm;
        if clipped {
            grads.scale(c.clip_norm / grad_norm);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(crate::params::ParamId(i)) else { continue };
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let iter = p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gv), (mv, vv)) in iter {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        StepInfo { grad_norm, clipped }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_learning_rate_and_skips_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let frozen = store.add("f", ParamGroup::Backbone, 1, 2, Init::Ones, &mut rng);
        let w = store.add("w", ParamGroup::Fusion, 1, 2, Init::Zeros, &mut rng);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, clip_norm: 0.0, ..Default::default() }, &store).unwrap();
        let mut grads = ParamGrads::new(store.len());
        grads.accumulate(frozen, &Matrix::row_vector(vec![5.0, 5.0]));
        grads.accumulate(w, &Matrix::row_vector(vec![0.3, -2.0]));
        opt.step(&mut store, &mut grads, 0.1);
        assert_eq!(store.value(frozen).data(), &[1.0, 1.0]);
        let moved = store.value(w).data();
        assert!((moved[0] + 0.1).abs() < 1e-6 && (moved[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Fusion, 1, 2, Init::Zeros, &mut rng);
        let mut opt = AdamW::new(AdamWConfig::default(), &store).unwrap();
        let mut grads = ParamGrads::new(store.len());
        grads.accumulate(w, &Matrix::row_vector(vec![3.0, 4.0]));
        let info = opt.step(&mut store, &mut grads, 1e-3);
        assert!(info.clipped);
        assert_eq!(info.grad_norm, 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
