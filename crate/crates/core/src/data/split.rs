//! Seeded train/validation/test splits and repeated K-fold partitions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VALIDATION_FRACTION: f64 = 0.15;
pub const TEST_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sizes of the three parts for `n` items: `(train, validation, test)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64 * TRAIN_FRACTION) + 0.5).floor() as usize;
    let val = ((n as f64 * VALIDATION_FRACTION) + 0.5).floor() as usize;
    let train = train.min(n);
    let val = val.min(n - train);
    (train, val, n - train - val)
}

/// Partitions indices `0..n` (optionally per label) into 70/15/15 parts.
pub fn split_indices(labels: &[usize], seed: u64, stratified: bool) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        by_label.into_values().collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        group.shuffle(&mut rng);
        let (a, b, _) = split_sizes(group.len());
        test.extend_from_slice(&group[a + b..]);
        val.extend_from_slice(&group[a..a + b]);
        train.extend_from_slice(&group[..a]);
    }
    if stratified {
        train.shuffle(&mut rng);
        val.shuffle(&mut rng);
        test.shuffle(&mut rng);
    }
    (train, val, test)
}

/// Deterministic 70/15/15 split, stratified by label when requested.
pub fn split_dataset(samples: Vec<Sample>, seed: u64, stratified: bool) -> DatasetSplit {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (tr, va, te) = split_indices(&labels, seed, stratified);
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: Vec<usize>| -> Vec<Sample> { idx.into_iter().map(|i| slots[i].take().expect("disjoint")).collect() };
    DatasetSplit {
        train: take(tr),
        validation: take(va),
        test: take(te),
        seed,
    }
}

/// One K-fold partition, as indices into the original sample list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// `repeats` independent shuffles of `0..n`, each cut into `k` validation
/// folds of near-equal size.
pub fn kfold_split(n: usize, k: usize, repeats: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("kfold: need 2 <= K <= {n}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = Vec::with_capacity(k * repeats);
    for repeat in 0..repeats {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (base, extra) = (n / k, n % k);
        let mut start = 0;
        for fold in 0..k {
            let len = base + usize::from(fold < extra);
            let validation = order[start..start + len].to_vec();
            let train = order[..start].iter().chain(&order[start + len..]).copied().collect();
            folds.push(Fold {
                repeat,
                fold,
                train,
                validation,
            });
            start += len;
        }
    }
    Ok(folds)
}
