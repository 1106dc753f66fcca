//! PK batches: `P` distinct identities with `K` images each.
//!
//! Each epoch shuffles every identity's images into chunks of `K`; identities
//! with fewer than `K` images get one chunk drawn with replacement. Batches
//! take a chunk from the `P` identities with the most chunks left, so the
//! epoch ends with at most `P - 1` unused chunks. Identities left out of every
//! batch get one extra batch, padded with other identities.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kvconfig::ConfigError;

#[derive(Clone, Debug)]
pub struct PkSampler {
    /// image indices per identity
    groups: Vec<Vec<usize>>,
    p: usize,
    k: usize,
    seed: u64,
}

impl PkSampler {
    /// `labels[i]` is the identity of image `i`. Labels need not be dense.
    pub fn new(labels: &[usize], p: usize, k: usize, seed: u64) -> Result<Self, ConfigError> {
        if p < 2 || k < 2 {
            return Err(ConfigError::Invalid(format!(
                "PK batches need P >= 2 and K >= 2, got P={p} K={k}"
            )));
        }
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < p {
            return Err(ConfigError::Invalid(format!(
                "P={p} exceeds the {} identities in the dataset",
                ids.len()
            )));
        }
        let mut groups = vec![Vec::new(); ids.len()];
        for (i, l) in labels.iter().enumerate() {
            groups[ids.binary_search(l).expect("present")].push(i);
        }
        Ok(PkSampler { groups, p, k, seed })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    fn chunk<R: Rng>(&self, g: &[usize], rng: &mut R) -> Vec<usize> {
        if g.len() >= self.k {
            g.choose_multiple(rng, self.k).copied().collect()
        } else {
            (0..self.k).map(|_| g[rng.gen_range(0..g.len())]).collect()
        }
    }

    /// The batches for `epoch`, a pure function of `(seed, epoch)`.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);

        let mut pools: Vec<Vec<Vec<usize>>> = self
            .groups
            .iter()
            .map(|g| {
                if g.len() < self.k {
                    vec![self.chunk(g, &mut rng)]
                } else {
                    let mut s = g.clone();
                    s.shuffle(&mut rng);
                    s.chunks_exact(self.k).map(<[usize]>::to_vec).collect()
                }
            })
            .collect();

        let mut used = vec![false; pools.len()];
        let mut batches = Vec::new();
        loop {
            let mut order: Vec<usize> = (0..pools.len()).filter(|&i| !pools[i].is_empty()).collect();
            if order.len() < self.p {
                break;
            }
            order.shuffle(&mut rng);
            order.sort_by_key(|&i| std::cmp::Reverse(pools[i].len()));
            let mut batch = Vec::with_capacity(self.batch_size());
            for &i in &order[..self.p] {
                batch.extend(pools[i].pop().expect("non-empty"));
                used[i] = true;
            }
            batches.push(batch);
        }

        let mut missing: Vec<usize> = (0..pools.len()).filter(|&i| !used[i]).collect();
        while !missing.is_empty() {
            let take: Vec<usize> = missing.drain(..missing.len().min(self.p)).collect();
            let mut fill: Vec<usize> = (0..pools.len()).filter(|i| !take.contains(i)).collect();
            fill.shuffle(&mut rng);
            let mut batch = Vec::with_capacity(self.batch_size());
            for &i in take.iter().chain(&fill[..self.p - take.len()]) {
                batch.extend(self.chunk(&self.groups[i], &mut rng));
            }
            batches.push(batch);
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn counts(batch: &[usize], labels: &[usize]) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &i in batch {
            *m.entry(labels[i]).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn batches_have_p_identities_of_k() {
        let labels: Vec<usize> = (0..40).map(|i| i / 8).collect();
        let s = PkSampler::new(&labels, 2, 4, 1).unwrap();
        for b in s.epoch(0) {
            assert_eq!(b.len(), 8);
            let c = counts(&b, &labels);
            assert_eq!(c.len(), 2);
            assert!(c.values().all(|&n| n == 4));
        }
    }

    #[test]
    fn every_identity_appears_each_epoch() {
        // five identities of one chunk each cannot split evenly into P=4
        let labels: Vec<usize> = (0..20).map(|i| i / 4).collect();
        let s = PkSampler::new(&labels, 4, 4, 9).unwrap();
        for e in 0..5 {
            let seen: std::collections::BTreeSet<usize> = s.epoch(e).iter().flatten().map(|&i| labels[i]).collect();
            assert_eq!(seen.len(), 5);
        }
    }

    #[test]
    fn small_identity_is_resampled() {
        let mut labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        labels.push(3);
        let s = PkSampler::new(&labels, 2, 4, 2).unwrap();
        let batches = s.epoch(0);
        let with_small: Vec<_> = batches.iter().filter(|b| b.contains(&12)).collect();
        assert!(!with_small.is_empty());
        for b in with_small {
            assert_eq!(b.iter().filter(|&&i| i == 12).count(), 4);
        }
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let labels: Vec<usize> = (0..64).map(|i| i % 8).collect();
        let a = PkSampler::new(&labels, 4, 4, 7).unwrap();
        let b = PkSampler::new(&labels, 4, 4, 7).unwrap();
        assert_eq!(a.epoch(3), b.epoch(3));
        assert_ne!(a.epoch(3), a.epoch(4));
    }

    #[test]
    fn rejects_impossible_shapes() {
        let labels = [0, 0, 1, 1];
        assert!(PkSampler::new(&labels, 3, 2, 0).is_err());
        assert!(PkSampler::new(&labels, 2, 1, 0).is_err());
        assert!(PkSampler::new(&labels, 1, 2, 0).is_err());
    }
}
