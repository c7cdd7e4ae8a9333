//! Grouped k-fold splitting. All trajectories of one system (one `group_id`)
//! stay within a single set of a fold, so no information leaks between
//! training, validation and test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SystemSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldSplit {
    /// Regime-label counts per set, for the balance report (imbalance is
    /// reported, never corrected).
    pub fn regime_counts(&self, samples: &[SystemSample]) -> [std::collections::BTreeMap<usize, usize>; 3] {
        let count = |idx: &[usize]| {
            let mut map = std::collections::BTreeMap::new();
            for &i in idx {
                *map.entry(samples[i].regime_label).or_insert(0) += 1;
            }
            map
        };
        [count(&self.train), count(&self.val), count(&self.test)]
    }
}

/// Partitions groups into `k` folds. In fold `f` the test set is group chunk
/// `f`; validation groups are carved from the remaining ones (about a
/// quarter, at least one group); everything else trains. Each group is in the
/// test set of exactly one fold.
pub fn grouped_kfold(samples: &[SystemSample], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k} folds make no sense")));
    }
    let mut groups: Vec<usize> = {
        let mut set: Vec<usize> = samples.iter().map(|s| s.group_id).collect();
        set.sort_unstable();
        set.dedup();
        set
    };
    if groups.len() < k + 2 {
        return Err(Error::InvalidArgument(format!(
            "{} distinct groups cannot support {k} folds with validation (need at least {})",
            groups.len(),
            k + 2
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    // k nearly equal chunks; the first (len % k) chunks get one extra group.
    let base = groups.len() / k;
    let extra = groups.len() % k;
    let mut chunks: Vec<Vec<usize>> = Vec::with_capacity(k);
    let mut at = 0;
    for c in 0..k {
        let size = base + usize::from(c < extra);
        chunks.push(groups[at..at + size].to_vec());
        at += size;
    }

    let by_group = |wanted: &[usize]| -> Vec<usize> {
        let set: std::collections::HashSet<usize> = wanted.iter().copied().collect();
        samples
            .iter()
            .enumerate()
            .filter(|(_, s)| set.contains(&s.group_id))
            .map(|(i, _)| i)
            .collect()
    };

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test_groups = chunks[f].clone();
        let rest: Vec<usize> = (0..k)
            .filter(|&c| c != f)
            .flat_map(|c| chunks[c].iter().copied())
            .collect();
        let n_val = (rest.len() as f64 * 0.25).round().max(1.0) as usize;
        let val_groups = rest[..n_val].to_vec();
        let train_groups = rest[n_val..].to_vec();
        if train_groups.is_empty() {
            return Err(Error::InvalidArgument(
                "not enough groups left for a training split".into(),
            ));
        }
        folds.push(FoldSplit {
            train: by_group(&train_groups),
            val: by_group(&val_groups),
            test: by_group(&test_groups),
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, CorpusConfig};

    fn corpus(n_systems: usize, seed: u64) -> Vec<SystemSample> {
        generate_dataset(
            &CorpusConfig {
                n_systems,
                cycles_per_system: (1, 3),
                bodies: 2,
                frames: 3,
                ..CorpusConfig::default()
            },
            seed,
        )
        .unwrap()
        .samples
    }

    fn group_set(samples: &[SystemSample], idx: &[usize]) -> std::collections::HashSet<usize> {
        idx.iter().map(|&i| samples[i].group_id).collect()
    }

    #[test]
    fn six_groups_three_folds_partition_the_tests() {
        let samples = corpus(6, 4);
        let folds = grouped_kfold(&samples, 3, 9).unwrap();
        assert_eq!(folds.len(), 3);
        let mut all_test_groups = std::collections::HashSet::new();
        for fold in &folds {
            let tg = group_set(&samples, &fold.test);
            assert_eq!(tg.len(), 2);
            for g in tg {
                assert!(all_test_groups.insert(g), "group {g} tested twice");
            }
        }
        assert_eq!(all_test_groups.len(), 6);
    }

    #[test]
    fn no_group_spans_two_sets_of_one_fold() {
        for seed in 0..20 {
            let samples = corpus(9, seed);
            for fold in grouped_kfold(&samples, 3, seed).unwrap() {
                let tr = group_set(&samples, &fold.train);
                let va = group_set(&samples, &fold.val);
                let te = group_set(&samples, &fold.test);
                assert!(tr.is_disjoint(&va));
                assert!(tr.is_disjoint(&te));
                assert!(va.is_disjoint(&te));
                // every sample lands in exactly one set
                assert_eq!(
                    fold.train.len() + fold.val.len() + fold.test.len(),
                    samples.len()
                );
            }
        }
    }

    #[test]
    fn too_few_groups_is_an_error() {
        let samples = corpus(4, 0);
        assert!(grouped_kfold(&samples, 3, 0).is_err());
    }

    #[test]
    fn splits_are_deterministic_in_the_seed() {
        let samples = corpus(8, 2);
        assert_eq!(
            grouped_kfold(&samples, 3, 5).unwrap(),
            grouped_kfold(&samples, 3, 5).unwrap()
        );
        assert_ne!(
            grouped_kfold(&samples, 3, 5).unwrap(),
            grouped_kfold(&samples, 3, 6).unwrap()
        );
    }

    #[test]
    fn regime_counts_cover_all_samples() {
        let samples = corpus(8, 3);
        let folds = grouped_kfold(&samples, 3, 1).unwrap();
        let counts = folds[0].regime_counts(&samples);
        let total: usize = counts.iter().flat_map(|m| m.values()).sum();
        assert_eq!(total, samples.len());
    }
}
