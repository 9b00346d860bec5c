//! Fold protocol and episode sampling.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::derive_seed;
use crate::data::Dataset;
use crate::error::{MceError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Fold `i` holds out the `i`-th contiguous block of classes.
pub fn split_folds(n_classes: usize, n_folds: usize) -> Result<Vec<FoldSplit>> {
    if n_folds == 0 || n_classes % n_folds != 0 {
        return Err(MceError::Config(format!(
            "{n_classes} classes do not split into {n_folds} folds"
        )));
    }
    let per = n_classes / n_folds;
    Ok((0..n_folds)
        .map(|fold| {
            let test_classes: Vec<usize> = (fold * per..(fold + 1) * per).collect();
            FoldSplit {
                fold,
                train_classes: (0..n_classes)
                    .filter(|c| !test_classes.contains(c))
                    .collect(),
                test_classes,
            }
        })
        .collect())
}

/// Sample indices grouped by target class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPool {
    pub by_class: BTreeMap<usize, Vec<usize>>,
}

impl ClassPool {
    pub fn classes(&self) -> Vec<usize> {
        self.by_class.keys().copied().collect()
    }

    pub fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.values().flatten().copied()
    }
}

/// Training samples of `split`: target in a training class and no test
/// class anywhere in the image, distractors included.
pub fn training_pool(data: &Dataset, split: &FoldSplit) -> ClassPool {
    let mut by_class: BTreeMap<usize, Vec<usize>> = split
        .train_classes
        .iter()
        .map(|&c| (c, Vec::new()))
        .collect();
    for (i, s) in data.samples.iter().enumerate() {
        if split.train_classes.contains(&s.class_id)
            && !s.present.iter().any(|c| split.test_classes.contains(c))
        {
            by_class.get_mut(&s.class_id).expect("train class").push(i);
        }
    }
    ClassPool { by_class }
}

/// Evaluation samples of `split`: every image whose target is a test class.
pub fn test_pool(data: &Dataset, split: &FoldSplit) -> ClassPool {
    ClassPool {
        by_class: split
            .test_classes
            .iter()
            .map(|&c| (c, data.indices_of(c)))
            .collect(),
    }
}

/// Indices into the dataset for one K-shot task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: usize,
    pub support: Vec<usize>,
    pub query: usize,
}

/// Draws a class uniformly from the pool, then `k + 1` distinct samples of it.
pub fn sample_episode(pool: &ClassPool, k: usize, rng: &mut impl Rng) -> Result<Episode> {
    if k == 0 {
        return Err(MceError::contract("sample_episode", "K must be >= 1"));
    }
    let classes = pool.classes();
    if classes.is_empty() {
        return Err(MceError::contract("sample_episode", "empty class pool"));
    }
    let class_id = classes[rng.gen_range(0..classes.len())];
    let members = &pool.by_class[&class_id];
    if members.len() < k + 1 {
        return Err(MceError::InsufficientSamples {
            class: class_id,
            available: members.len(),
            needed: k + 1,
        });
    }
    let picks = index::sample(rng, members.len(), k + 1);
    let mut chosen: Vec<usize> = picks.iter().map(|i| members[i]).collect();
    let query = chosen.pop().expect("k + 1 picks");
    Ok(Episode {
        class_id,
        support: chosen,
        query,
    })
}

/// Episode `index` of a stream named `purpose`; each episode has its own
/// RNG, so streams can be sliced or evaluated in parallel.
pub fn nth_episode(
    pool: &ClassPool,
    k: usize,
    seed: u64,
    purpose: &str,
    index: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index));
    sample_episode(pool, k, &mut rng)
}

/// The fixed evaluation episode list for a fold.
pub fn evaluation_episodes(
    pool: &ClassPool,
    k: usize,
    n: usize,
    seed: u64,
    fold: usize,
) -> Result<Vec<Episode>> {
    let purpose = format!("eval.fold{fold}.k{k}");
    (0..n as u64)
        .map(|i| nth_episode(pool, k, seed, &purpose, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_zero_holds_out_first_pair() {
        let folds = split_folds(8, 4).unwrap();
        assert_eq!(folds[0].test_classes, vec![0, 1]);
        assert_eq!(folds[0].train_classes, vec![2, 3, 4, 5, 6, 7]);
        assert!(split_folds(8, 3).is_err());
    }

    #[test]
    fn episode_members_are_distinct() {
        let pool = ClassPool {
            by_class: [(0, (0..10).collect()), (1, (10..20).collect())]
                .into_iter()
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 5] {
            let e = sample_episode(&pool, k, &mut rng).unwrap();
            let mut all = e.support.clone();
            all.push(e.query);
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), k + 1);
        }
        let tiny = ClassPool {
            by_class: [(3, vec![1, 2])].into_iter().collect(),
        };
        assert!(matches!(
            sample_episode(&tiny, 2, &mut rng),
            Err(MceError::InsufficientSamples { class: 3, .. })
        ));
    }
}
