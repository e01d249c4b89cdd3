use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::numerics::Tensor;

/// Per-sample feature sequence `[L, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub values: Tensor,
    pub sample_id: usize,
    /// Point index (into the sample's input cloud) of every row.
    pub point_index: Vec<usize>,
}

impl FeatureSequence {
    pub fn new(values: Tensor, sample_id: usize) -> Self {
        let point_index = (0..values.rows()).collect();
        Self {
            values,
            sample_id,
            point_index,
        }
    }
}

/// Concatenated and optionally shuffled token sequence of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SerializedBatch {
    /// `[sum L, C]`; row `i` is row `permutation[i]` of the plain concatenation.
    pub tokens: Tensor,
    pub permutation: Vec<usize>,
    /// Row span of each sample in the plain concatenation.
    pub boundaries: Vec<Range<usize>>,
    pub sample_ids: Vec<usize>,
    pub point_index: Vec<Vec<usize>>,
}

/// Row permutation applied after concatenation. `None` keeps batch order.
pub fn token_permutation(len: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row spans of consecutive blocks with the given lengths.
pub fn spans(lengths: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut offset = 0;
    lengths
        .into_iter()
        .map(|l| {
            let r = offset..offset + l;
            offset += l;
            r
        })
        .collect()
}

pub fn serialize(
    batch: &[FeatureSequence],
    shuffle_seed: Option<u64>,
) -> Result<SerializedBatch, ModelError> {
    let first = batch.first().ok_or(ModelError::EmptyBatch)?;
    let c = first.values.cols();
    for s in batch {
        if s.values.cols() != c {
            return Err(ModelError::ChannelMismatch {
                expected: c,
                found: s.values.cols(),
            });
        }
    }
    let boundaries = spans(batch.iter().map(|s| s.values.rows()));
    let total = boundaries.last().map_or(0, |r| r.end);
    let permutation = token_permutation(total, shuffle_seed);
    let concat: Vec<f64> = batch
        .iter()
        .flat_map(|s| s.values.data().iter().copied())
        .collect();
    let mut data = Vec::with_capacity(concat.len());
    for &p in &permutation {
        data.extend_from_slice(&concat[p * c..(p + 1) * c]);
    }
    Ok(SerializedBatch {
        tokens: Tensor::new(vec![total, c], data).expect("shape"),
        permutation,
        boundaries,
        sample_ids: batch.iter().map(|s| s.sample_id).collect(),
        point_index: batch.iter().map(|s| s.point_index.clone()).collect(),
    })
}

impl SerializedBatch {
    /// Undoes the permutation and splits at the sample boundaries.
    pub fn deserialize(&self) -> Vec<FeatureSequence> {
        self.split(&self.tokens)
    }

    /// Splits any `[sum L, C']` tensor laid out in serialized order back into
    /// per-sample sequences.
    pub fn split(&self, serialized: &Tensor) -> Vec<FeatureSequence> {
        let c = serialized.cols();
        let inv = invert_permutation(&self.permutation);
        self.boundaries
            .iter()
            .zip(&self.sample_ids)
            .zip(&self.point_index)
            .map(|((span, &id), idx)| {
                let mut data = Vec::with_capacity(span.len() * c);
                for r in span.clone() {
                    data.extend_from_slice(serialized.row(inv[r]));
                }
                FeatureSequence {
                    values: Tensor::new(vec![span.len(), c], data).expect("shape"),
                    sample_id: id,
                    point_index: idx.clone(),
                }
            })
            .collect()
    }
}
