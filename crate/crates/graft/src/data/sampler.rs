//! Triplet sampling over the training split.
//!
//! Anchors are drawn uniformly over eligible images (identities with at
//! least two samples); each anchor expands into K triplets with distinct
//! positives when available (with replacement otherwise); negatives draw a
//! uniform other identity, then a uniform image of it. Identities with a
//! single sample are excluded from the anchor role and reported.
//!
//! The sampler holds no RNG of its own: callers pass the stream in, so one
//! serialized generator can drive sampling, augmentation and dropout and a
//! resumed run replays the exact same draws.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

use super::dataset::MultimodalSample;

/// Aligned triplet indices into the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug)]
pub struct TripletSampler {
    /// id -> indices of its samples in the train list.
    by_id: BTreeMap<u64, Vec<usize>>,
    /// Every id; negatives may come from any of them.
    ids: Vec<u64>,
    /// Images of ids with >= 2 samples; only these can anchor.
    anchor_pool: Vec<usize>,
    pub excluded_single_sample_ids: Vec<u64>,
    batch_triplets: usize,
    positives_per_anchor: usize,
}

impl TripletSampler {
    pub fn new(
        train: &[MultimodalSample],
        batch_triplets: usize,
        positives_per_anchor: usize,
    ) -> Result<Self> {
        if batch_triplets == 0 || positives_per_anchor == 0 {
            return Err(Error::config(
                "sampler: batch_triplets and positives_per_anchor must be >= 1",
            ));
        }
        let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, s) in train.iter().enumerate() {
            by_id.entry(s.id).or_default().push(i);
        }
        let excluded: Vec<u64> = by_id
            .iter()
            .filter(|(_, v)| v.len() < 2)
            .map(|(id, _)| *id)
            .collect();
        let anchor_pool: Vec<usize> = by_id
            .values()
            .filter(|v| v.len() >= 2)
            .flatten()
            .copied()
            .collect();
        if anchor_pool.is_empty() || by_id.len() < 2 {
            return Err(Error::data(
                "sampler: need >= 2 identities and at least one with two or more samples",
            ));
        }
        let ids: Vec<u64> = by_id.keys().copied().collect();
        Ok(TripletSampler {
            by_id,
            ids,
            anchor_pool,
            excluded_single_sample_ids: excluded,
            batch_triplets,
            positives_per_anchor,
        })
    }

    /// Draws the next batch of exactly `batch_triplets` triplets.
    pub fn next_batch(&self, train: &[MultimodalSample], rng: &mut SeededRng) -> TripletBatch {
        let mut batch = TripletBatch {
            anchors: Vec::with_capacity(self.batch_triplets),
            positives: Vec::with_capacity(self.batch_triplets),
            negatives: Vec::with_capacity(self.batch_triplets),
        };
        while batch.len() < self.batch_triplets {
            let anchor = self.anchor_pool[rng.below(self.anchor_pool.len())];
            let anchor_id = train[anchor].id;
            let group = &self.by_id[&anchor_id];
            let mut pool: Vec<usize> = group.iter().copied().filter(|&i| i != anchor).collect();
            rng.shuffle(&mut pool);
            let want = self
                .positives_per_anchor
                .min(self.batch_triplets - batch.len());
            for k in 0..want {
                let positive = if k < pool.len() {
                    pool[k]
                } else {
                    pool[rng.below(pool.len())]
                };
                let negative = self.draw_negative(anchor_id, rng);
                batch.anchors.push(anchor);
                batch.positives.push(positive);
                batch.negatives.push(negative);
            }
        }
        batch
    }

    fn draw_negative(&self, anchor_id: u64, rng: &mut SeededRng) -> usize {
        loop {
            let id = self.ids[rng.below(self.ids.len())];
            if id == anchor_id {
                continue;
            }
            let group = &self.by_id[&id];
            return group[rng.below(group.len())];
        }
    }
}

/// Draws a fixed number of batches from a fresh generator.
pub fn sample_triplets(
    train: &[MultimodalSample],
    batch_triplets: usize,
    positives_per_anchor: usize,
    mut rng: SeededRng,
    n_batches: usize,
) -> Result<Vec<TripletBatch>> {
    let sampler = TripletSampler::new(train, batch_triplets, positives_per_anchor)?;
    Ok((0..n_batches)
        .map(|_| sampler.next_batch(train, &mut rng))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::ImageBuf;

    fn tiny_train(ids: &[(u64, usize)]) -> Vec<MultimodalSample> {
        let mut out = Vec::new();
        for &(id, count) in ids {
            for k in 0..count {
                out.push(MultimodalSample {
                    id,
                    view: 0,
                    index: k as u64,
                    images: vec![ImageBuf::zeros(1, 2, 2)],
                });
            }
        }
        out
    }

    #[test]
    fn labels_always_correct() {
        let train = tiny_train(&[(1, 2), (2, 2)]);
        let sampler = TripletSampler::new(&train, 4, 1).unwrap();
        let mut rng = SeededRng::new(3);
        for _ in 0..250 {
            let batch = sampler.next_batch(&train, &mut rng);
            for i in 0..batch.len() {
                let (a, p, n) = (batch.anchors[i], batch.positives[i], batch.negatives[i]);
                assert_eq!(train[a].id, train[p].id);
                assert_ne!(a, p, "positive must be a different image");
                assert_ne!(train[a].id, train[n].id);
            }
        }
    }

    #[test]
    fn singleton_ids_excluded_from_anchors() {
        let train = tiny_train(&[(1, 2), (2, 2), (9, 1)]);
        let sampler = TripletSampler::new(&train, 8, 2).unwrap();
        assert_eq!(sampler.excluded_single_sample_ids, vec![9]);
        let singleton_index = train.iter().position(|s| s.id == 9).unwrap();
        let mut rng = SeededRng::new(5);
        for _ in 0..50 {
            let batch = sampler.next_batch(&train, &mut rng);
            assert!(!batch.anchors.contains(&singleton_index));
            assert!(!batch.positives.contains(&singleton_index));
        }
    }

    #[test]
    fn distinct_positives_when_available() {
        let train = tiny_train(&[(1, 5), (2, 5)]);
        let sampler = TripletSampler::new(&train, 4, 4).unwrap();
        let mut rng = SeededRng::new(7);
        let batch = sampler.next_batch(&train, &mut rng);
        // One anchor expanded to 4 triplets with 4 distinct positives.
        let anchor = batch.anchors[0];
        assert!(batch.anchors.iter().all(|&a| a == anchor));
        let unique: std::collections::HashSet<usize> = batch.positives.iter().copied().collect();
        assert_eq!(unique.len(), 4);
    }

    #[test]
    fn deterministic_stream_and_resume() {
        let train = tiny_train(&[(1, 3), (2, 3), (3, 3)]);
        let a = sample_triplets(&train, 5, 2, SeededRng::new(11), 4).unwrap();
        let b = sample_triplets(&train, 5, 2, SeededRng::new(11), 4).unwrap();
        assert_eq!(a, b);

        // Capturing the rng state mid-stream and restoring it replays the
        // remaining batches exactly.
        let sampler = TripletSampler::new(&train, 5, 2).unwrap();
        let mut rng = SeededRng::new(11);
        sampler.next_batch(&train, &mut rng);
        let state = rng.state();
        let rest = sampler.next_batch(&train, &mut rng);
        let mut resumed = SeededRng::restore(state);
        assert_eq!(sampler.next_batch(&train, &mut resumed), rest);
    }

    #[test]
    fn exact_batch_size() {
        let train = tiny_train(&[(1, 2), (2, 2)]);
        let sampler = TripletSampler::new(&train, 26, 8).unwrap();
        let mut rng = SeededRng::new(1);
        assert_eq!(sampler.next_batch(&train, &mut rng).len(), 26);
    }
}
