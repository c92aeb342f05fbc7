use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::store::{DatasetStore, Split};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;

/// `M` pairwise-disjoint subsets covering the base split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasePartition {
    pub subsets: Vec<Vec<usize>>,
}

impl BasePartition {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    /// Verifies disjointness and coverage of `universe` by set algebra.
    pub fn check(&self, universe: &[usize]) -> Result<()> {
        let mut seen = HashSet::with_capacity(universe.len());
        for (m, s) in self.subsets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Format(format!("partition subset {m} is empty")));
            }
            for &i in s {
                if !seen.insert(i) {
                    return Err(Error::Format(format!("sample {i} appears in more than one subset")));
                }
            }
        }
        let all: HashSet<usize> = universe.iter().copied().collect();
        if seen != all {
            return Err(Error::Format(format!(
                "partition covers {} samples, base split has {}",
                seen.len(),
                all.len()
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle of the base samples dealt round-robin into `m` subsets.
/// Each subset is returned in ascending order.
pub fn partition_base(store: &DatasetStore, m: usize, seed: u64) -> Result<BasePartition> {
    let base = store.samples_in(Split::Base);
    partition_indices(&base, m, seed)
}

/// Partitions arbitrary ids like [`partition_base`].
pub fn partition_indices(universe: &[usize], m: usize, seed: u64) -> Result<BasePartition> {
    if m == 0 {
        return Err(Error::InvalidArgument("ensemble size must be >= 1".into()));
    }
    if m > universe.len() {
        return Err(Error::Capacity(format!(
            "cannot split {} base samples into {m} nonempty subsets",
            universe.len()
        )));
    }
    let mut order = universe.to_vec();
    order.shuffle(&mut rng::stream(seed, "partition", &[m as u64]));
    let mut subsets = vec![Vec::with_capacity(order.len() / m + 1); m];
    for (pos, i) in order.into_iter().enumerate() {
        subsets[pos % m].push(i);
    }
    subsets.iter_mut().for_each(|s| s.sort_unstable());
    let p = BasePartition { subsets };
    p.check(universe)?;
    Ok(p)
}

/// Unlabeled features the stability term is computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct SrPool {
    pub features: Tensor,
    pub source_name: String,
}

impl SrPool {
    pub fn new(features: Tensor, source_name: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 || features.is_empty() {
            return Err(Error::Capacity("SR pool is empty".into()));
        }
        Ok(SrPool {
            features,
            source_name: source_name.into(),
        })
    }

    /// Pool made of a store's samples, labels dropped.
    pub fn from_store(store: &DatasetStore, source_name: impl Into<String>) -> Result<Self> {
        let all: Vec<usize> = (0..store.n_samples()).collect();
        SrPool::new(store.rows(&all), source_name)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `batch_size` draws, i.i.d. uniform with replacement, from `0..pool_len`.
pub fn sample_sr_indices<R: Rng>(pool_len: usize, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if pool_len == 0 {
        return Err(Error::Capacity("cannot sample from an empty SR pool".into()));
    }
    Ok((0..batch_size).map(|_| rng.gen_range(0..pool_len)).collect())
}

pub fn sample_sr_batch<R: Rng>(pool: &SrPool, batch_size: usize, rng: &mut R) -> Result<Tensor> {
    let idx = sample_sr_indices(pool.len(), batch_size, rng)?;
    Ok(pool.features.select_rows(&idx))
}
