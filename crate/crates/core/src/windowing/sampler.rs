//! Batch index streams for training.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::GlycemicLabel;

/// Deals every majority-class index exactly once per epoch (shuffled) and
/// tops each batch up with a fixed quota of minority indices drawn with
/// replacement. Nothing is synthesized; minority examples simply repeat.
#[derive(Debug, Clone)]
pub struct BalancedBatchSampler {
    minority: Vec<usize>,
    majority: Vec<usize>,
    batch_size: usize,
    minority_per_batch: usize,
    seed: u64,
}

impl BalancedBatchSampler {
    pub fn new(
        labels: &[GlycemicLabel],
        batch_size: usize,
        min_minority_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&min_minority_fraction) {
            return Err(Error::Config(format!(
                "min_minority_fraction {min_minority_fraction} must lie in [0, 1)"
            )));
        }
        let hypo: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_hypo()).collect();
        let normo: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_hypo()).collect();
        let (minority, majority) = if hypo.len() <= normo.len() {
            (hypo, normo)
        } else {
            (normo, hypo)
        };
        let minority_per_batch = (batch_size as f64 * min_minority_fraction).floor() as usize;
        if minority_per_batch > 0 && minority.is_empty() {
            return Err(Error::InsufficientClass(
                "balanced batches need at least one minority example".into(),
            ));
        }
        if majority.is_empty() {
            return Err(Error::InsufficientClass(
                "balanced batches need at least one majority example".into(),
            ));
        }
        if minority_per_batch >= batch_size {
            return Err(Error::Config(
                "minority quota leaves no room for majority examples".into(),
            ));
        }
        Ok(BalancedBatchSampler {
            minority,
            majority,
            batch_size,
            minority_per_batch,
            seed,
        })
    }

    pub fn minority_per_batch(&self) -> usize {
        self.minority_per_batch
    }

    /// The batches for one epoch. Deterministic in (sampler seed, epoch).
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("epoch:{epoch}")));
        let mut majority = self.majority.clone();
        majority.shuffle(&mut rng);
        let per_batch = self.batch_size - self.minority_per_batch;
        let mut batches = Vec::with_capacity(majority.len().div_ceil(per_batch));
        for chunk in majority.chunks(per_batch) {
            let mut batch = chunk.to_vec();
            for _ in 0..self.minority_per_batch {
                batch.push(self.minority[rng.gen_range(0..self.minority.len())]);
            }
            batches.push(batch);
        }
        batches
    }
}

/// Plain epoch batching: one seeded shuffle of all indices, chunked.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch:{epoch}")));
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(hypo: usize, normo: usize) -> Vec<GlycemicLabel> {
        let mut out = vec![GlycemicLabel::Hypo; hypo];
        out.extend(vec![GlycemicLabel::Normo; normo]);
        out
    }

    #[test]
    fn majority_appears_exactly_once_per_epoch() {
        let labels = labels(9, 200);
        let sampler = BalancedBatchSampler::new(&labels, 64, 0.25, 7).unwrap();
        assert_eq!(sampler.minority_per_batch(), 16);
        let batches = sampler.epoch(0);
        // 200 majority / 48 per batch -> 5 batches, the last partial.
        assert_eq!(batches.len(), 5);
        let mut majority_seen: Vec<usize> = Vec::new();
        for batch in &batches {
            let minority_count = batch.iter().filter(|&&i| labels[i].is_hypo()).count();
            assert_eq!(minority_count, 16);
            majority_seen.extend(batch.iter().filter(|&&i| !labels[i].is_hypo()));
        }
        majority_seen.sort_unstable();
        assert_eq!(majority_seen, (9..209).collect::<Vec<_>>());
        // Full batches hit the requested size; the last one is short.
        assert!(batches[..4].iter().all(|b| b.len() == 64));
        assert_eq!(batches[4].len(), 8 + 16);
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let labels = labels(5, 100);
        let sampler = BalancedBatchSampler::new(&labels, 32, 0.25, 3).unwrap();
        assert_eq!(sampler.epoch(2), sampler.epoch(2));
        assert_ne!(sampler.epoch(0), sampler.epoch(1));
    }

    #[test]
    fn zero_fraction_disables_the_quota() {
        let labels = labels(5, 50);
        let sampler = BalancedBatchSampler::new(&labels, 10, 0.0, 1).unwrap();
        let batches = sampler.epoch(0);
        assert!(batches.iter().all(|b| b.len() <= 10));
        // Only majority indices appear.
        assert!(batches
            .iter()
            .flatten()
            .all(|&i| !labels[i].is_hypo()));
    }

    #[test]
    fn full_fraction_is_rejected() {
        let labels = labels(5, 50);
        assert!(matches!(
            BalancedBatchSampler::new(&labels, 10, 1.0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn minority_is_the_smaller_class_either_way() {
        let labels = labels(100, 4);
        let sampler = BalancedBatchSampler::new(&labels, 16, 0.25, 1).unwrap();
        let batches = sampler.epoch(0);
        for batch in &batches {
            // Normo is the minority here.
            assert_eq!(batch.iter().filter(|&&i| !labels[i].is_hypo()).count(), 4);
        }
    }

    #[test]
    fn plain_batches_cover_everything_once() {
        let batches = shuffled_batches(103, 32, 5, 0);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }
}
