//! Synthetic data with a planted, feature-recoverable relation rule.
//!
//! Every relation (including `None`) owns an orthonormal direction in the
//! object feature space and another in the image feature space. A sample with
//! relation `r` carries one object equal to the object direction of `r` plus
//! Gaussian noise, and one image block built the same way. All other objects
//! and blocks are distractors with norm at most 0.5, so with zero noise the
//! planted object is the only one that reaches a unit dot product with any
//! direction. Entity tokens come from a sub-vocabulary owned by the entity's
//! type, and non-`None` relations only occur on their compatible type pair.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    CompatEntry, Dataset, DatasetBundle, ObjectFeature, RelationSchema, Sample, Span, Split, Vocabulary,
    NONE_RELATION,
};
use crate::error::{Error, Result};
use crate::tensor::{norm, Matrix};

const DISTRACTOR_MAX_NORM: f64 = 0.5;
const BASE_TYPE_NAMES: [&str; 4] = ["per", "org", "loc", "misc"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub vocab_size: usize,
    pub n_types: usize,
    /// Relation count including `None`.
    pub n_relations: usize,
    /// How many non-`None` relations share one type pair.
    pub relations_per_pair: usize,
    /// Objects per sample (K).
    pub k_objects: usize,
    /// Image blocks per sample (M).
    pub image_blocks: usize,
    pub raw_object_dim: usize,
    pub raw_image_dim: usize,
    pub min_text_len: usize,
    pub max_text_len: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Explicit split sizes; when absent the samples are split 80/10/10.
    pub splits: Option<SplitSizes>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            vocab_size: 200,
            n_types: 4,
            n_relations: 8,
            relations_per_pair: 2,
            k_objects: 10,
            image_blocks: 4,
            raw_object_dim: 32,
            raw_image_dim: 32,
            min_text_len: 8,
            max_text_len: 16,
            noise_std: 0.1,
            seed: 7,
            splits: None,
        }
    }
}

impl SyntheticSpec {
    fn sub_vocab_size(&self) -> usize {
        (self.vocab_size.saturating_sub(2)) / (2 * self.n_types.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.n_types == 0 {
            return bad("n_types must be positive".into());
        }
        if self.n_relations < 2 {
            return bad("n_relations must include None and at least one relation".into());
        }
        if self.relations_per_pair == 0 {
            return bad("relations_per_pair must be positive".into());
        }
        let slots = self.n_types * self.n_types * self.relations_per_pair;
        if self.n_relations - 1 > slots {
            return bad(format!("{} relations do not fit {slots} type-pair slots", self.n_relations - 1));
        }
        if self.n_relations > self.raw_object_dim || self.n_relations > self.raw_image_dim {
            return bad("feature dims must be at least n_relations to hold orthogonal directions".into());
        }
        if self.k_objects == 0 || self.image_blocks == 0 {
            return bad("k_objects and image_blocks must be positive".into());
        }
        if self.min_text_len < 2 || self.min_text_len > self.max_text_len {
            return bad("text length range must satisfy 2 <= min <= max".into());
        }
        if self.sub_vocab_size() == 0 {
            return bad(format!("vocab_size {} too small for {} types", self.vocab_size, self.n_types));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        if let Some(s) = self.splits {
            if s.train + s.dev + s.test != self.n_samples {
                return bad("split sizes must sum to n_samples".into());
            }
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> SplitSizes {
        self.splits.unwrap_or_else(|| {
            let dev = self.n_samples / 10;
            let test = self.n_samples / 10;
            SplitSizes { train: self.n_samples - dev - test, dev, test }
        })
    }
}

/// Generated samples plus the planted directions that define the rule.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    /// `n_relations x raw_object_dim`, orthonormal rows.
    pub object_directions: Matrix,
    /// `n_relations x raw_image_dim`, orthonormal rows.
    pub image_directions: Matrix,
    pub spec: SyntheticSpec,
}

impl SyntheticData {
    /// Partitions the samples, in generation order, into train/dev/test.
    pub fn into_bundle(self) -> DatasetBundle {
        let sizes = self.spec.split_sizes();
        let schema = self.dataset.schema.clone();
        let mut samples = self.dataset.samples;
        let test = samples.split_off(sizes.train + sizes.dev);
        let dev = samples.split_off(sizes.train);
        DatasetBundle {
            vocab: self.vocab,
            train: Dataset::new(samples, schema.clone(), Split::Train),
            dev: Dataset::new(dev, schema.clone(), Split::Dev),
            test: Dataset::new(test, schema.clone(), Split::Test),
            schema,
        }
    }
}

fn type_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| BASE_TYPE_NAMES.get(i).map_or_else(|| format!("type{i}"), |s| s.to_string()))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn orthonormal_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= proj * b);
        }
        let nv = norm(&v);
        if nv > 1e-6 {
            v.iter_mut().for_each(|a| *a /= nv);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows)
}

fn distractor(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let target = DISTRACTOR_MAX_NORM * rng.random_range(0.2..1.0);
    let nv = norm(&v).max(1e-12);
    v.iter_mut().for_each(|a| *a *= target / nv);
    v
}

fn planted(direction: &[f64], noise_std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    direction.iter().map(|d| d + noise_std * gaussian(rng)).collect()
}

/// Generates a dataset under the planted rule. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let types = type_names(spec.n_types);

    let mut pairs: Vec<(usize, usize)> =
        (0..spec.n_types).flat_map(|h| (0..spec.n_types).map(move |t| (h, t))).collect();
    pairs.shuffle(&mut rng);
    let mut relations = vec![NONE_RELATION.to_string()];
    let mut rel_pair = vec![None];
    for r in 1..spec.n_relations {
        let (h, t) = pairs[(r - 1) / spec.relations_per_pair];
        relations.push(format!("/{}/{}/rel_{r}", types[h], types[t]));
        rel_pair.push(Some((h, t)));
    }
    let no_overrides: [CompatEntry; 0] = [];
    let schema = Arc::new(RelationSchema::new(relations, types.clone(), &no_overrides)?);

    let sub = spec.sub_vocab_size();
    let generic = spec.vocab_size - 2 - spec.n_types * sub;
    let mut words: Vec<String> = (0..generic).map(|i| format!("w{i}")).collect();
    for t in &types {
        words.extend((0..sub).map(|i| format!("{t}_{i}")));
    }
    let vocab = Vocabulary::from_tokens(words);
    let generic_ids = 2..(2 + generic) as u32;
    let type_ids = |t: usize| {
        let start = (2 + generic + t * sub) as u32;
        start..start + sub as u32
    };

    let object_directions = orthonormal_rows(spec.n_relations, spec.raw_object_dim, &mut rng);
    let image_directions = orthonormal_rows(spec.n_relations, spec.raw_image_dim, &mut rng);

    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let r = rng.random_range(0..spec.n_relations);
        let (head_type, tail_type) = match rel_pair[r] {
            Some(p) => p,
            None => (rng.random_range(0..spec.n_types), rng.random_range(0..spec.n_types)),
        };

        let len = rng.random_range(spec.min_text_len..=spec.max_text_len);
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(generic_ids.clone())).collect();
        let head_len = rng.random_range(1..=2.min(len / 2));
        let tail_len = rng.random_range(1..=2.min(len / 2));
        let head_first = rng.random_bool(0.5);
        let (first_len, second_len) = if head_first { (head_len, tail_len) } else { (tail_len, head_len) };
        let a = rng.random_range(0..=len - first_len - second_len);
        let b = rng.random_range(a + first_len..=len - second_len);
        let first = Span::new(a, a + first_len - 1);
        let second = Span::new(b, b + second_len - 1);
        let (head_span, tail_span) = if head_first { (first, second) } else { (second, first) };
        for (span, t) in [(head_span, head_type), (tail_span, tail_type)] {
            for tok in &mut tokens[span.start..=span.end] {
                *tok = rng.random_range(type_ids(t));
            }
        }

        let planted_slot = rng.random_range(0..spec.k_objects);
        let mut objects: Vec<ObjectFeature> = (0..spec.k_objects)
            .map(|k| {
                let vec = if k == planted_slot {
                    planted(object_directions.row(r), spec.noise_std, &mut rng)
                } else {
                    distractor(spec.raw_object_dim, &mut rng)
                };
                ObjectFeature { vec, roi_score: rng.random_range(0.0..1.0) }
            })
            .collect();
        objects.sort_by(|x, y| y.roi_score.total_cmp(&x.roi_score));

        let planted_block = rng.random_range(0..spec.image_blocks);
        let blocks: Vec<Vec<f64>> = (0..spec.image_blocks)
            .map(|m| {
                if m == planted_block {
                    planted(image_directions.row(r), spec.noise_std, &mut rng)
                } else {
                    distractor(spec.raw_image_dim, &mut rng)
                }
            })
            .collect();

        samples.push(Sample {
            id: format!("syn-{}-{i:05}", spec.seed),
            tokens,
            head_span,
            tail_span,
            head_type,
            tail_type,
            image_feature: Matrix::from_rows(&blocks),
            objects,
            relation: Some(r),
        });
    }

    Ok(SyntheticData {
        dataset: Dataset::new(samples, schema, Split::Train),
        vocab,
        object_directions,
        image_directions,
        spec: spec.clone(),
    })
}
