use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Span, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_BATCH_SIZE: usize = 100;

/// A padded mini-batch. Row `b` of every field describes `dataset.samples[indices[b]]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Token ids padded with [`PAD_ID`] to the longest sample.
    pub tokens: Vec<Vec<u32>>,
    pub token_mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub image_features: Vec<Matrix>,
    /// Object features padded with zero rows to the largest object count.
    pub object_features: Vec<Matrix>,
    pub object_mask: Vec<Vec<bool>>,
    pub object_counts: Vec<usize>,
    pub head_spans: Vec<Span>,
    pub tail_spans: Vec<Span>,
    pub head_types: Vec<usize>,
    pub tail_types: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_indices(dataset: &Dataset, indices: &[usize]) -> Self {
        let samples: Vec<_> = indices.iter().map(|&i| &dataset.samples[i]).collect();
        let max_len = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        let max_objects = samples.iter().map(|s| s.objects.len()).max().unwrap_or(0);
        let mut b = Batch {
            indices: indices.to_vec(),
            tokens: Vec::with_capacity(samples.len()),
            token_mask: Vec::with_capacity(samples.len()),
            lengths: Vec::with_capacity(samples.len()),
            image_features: Vec::with_capacity(samples.len()),
            object_features: Vec::with_capacity(samples.len()),
            object_mask: Vec::with_capacity(samples.len()),
            object_counts: Vec::with_capacity(samples.len()),
            head_spans: Vec::with_capacity(samples.len()),
            tail_spans: Vec::with_capacity(samples.len()),
            head_types: Vec::with_capacity(samples.len()),
            tail_types: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            let n = s.tokens.len();
            let mut toks = s.tokens.clone();
            toks.resize(max_len, PAD_ID);
            b.tokens.push(toks);
            b.token_mask.push((0..max_len).map(|i| i < n).collect());
            b.lengths.push(n);
            b.image_features.push(s.image_feature.clone());
            let dim = s.objects.first().map_or(0, |o| o.vec.len());
            let mut objects = Matrix::zeros(max_objects, dim);
            for (k, o) in s.objects.iter().enumerate() {
                objects.row_mut(k).copy_from_slice(&o.vec);
            }
            b.object_features.push(objects);
            b.object_mask.push((0..max_objects).map(|k| k < s.objects.len()).collect());
            b.object_counts.push(s.objects.len());
            b.head_spans.push(s.head_span);
            b.tail_spans.push(s.tail_span);
            b.head_types.push(s.head_type);
            b.tail_types.push(s.tail_type);
            b.labels.push(s.relation);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Single-consumer stream of batches over a dataset.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::from_indices(self.dataset, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

impl BatchIter<'_> {
    /// Sample indices in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Batches over `dataset`, shuffled deterministically from `seed` when asked.
/// The final partial batch is kept. `needs_negatives` rejects batch sizes that
/// leave no in-batch negative for the self-identification loss.
pub fn batch_iterator(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    needs_negatives: bool,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if needs_negatives && batch_size < 2 {
        return Err(Error::InvalidConfig(
            "batch_size must be >= 2 when the self-identification loss is enabled".into(),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter { dataset, order, batch_size, pos: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn data(n: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec { n_samples: n, ..Default::default() }).unwrap().dataset
    }

    #[test]
    fn partial_final_batch_is_kept() {
        let d = data(5);
        let sizes: Vec<usize> = batch_iterator(&d, 2, 0, false, true).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn shuffle_is_deterministic() {
        let d = data(50);
        let a: Vec<_> = batch_iterator(&d, 8, 11, true, true).unwrap().flat_map(|b| b.indices).collect();
        let b: Vec<_> = batch_iterator(&d, 8, 11, true, true).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(a, b);
        let c: Vec<_> = batch_iterator(&d, 8, 12, true, true).unwrap().flat_map(|b| b.indices).collect();
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn batch_of_one_rejected_with_negatives() {
        let d = data(4);
        assert!(batch_iterator(&d, 1, 0, false, true).is_err());
        assert!(batch_iterator(&d, 1, 0, false, false).is_ok());
    }

    #[test]
    fn padding_positions_are_masked() {
        let d = data(6);
        let b = batch_iterator(&d, 6, 0, false, false).unwrap().next().unwrap();
        assert_eq!(b.labels.len(), b.len());
        for (row, (mask, &len)) in b.token_mask.iter().zip(&b.lengths).enumerate() {
            assert_eq!(mask.iter().filter(|m| **m).count(), len);
            assert!(b.tokens[row][len..].iter().all(|&t| t == PAD_ID));
        }
    }
}
