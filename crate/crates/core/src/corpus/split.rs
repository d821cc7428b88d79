//! Stratified train/validation/test splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Product};

/// Three-way split ratios. Each must be positive and they must sum to one
/// within 1e-9.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, CorpusError> {
        let r = SplitRatios {
            train,
            validation,
            test,
        };
        if train <= 0.0
            || validation <= 0.0
            || test <= 0.0
            || (train + validation + test - 1.0).abs() > 1e-9
        {
            return Err(CorpusError::BadRatios([train, validation, test]));
        }
        Ok(r)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

/// Disjoint index sets covering all products of the catalog they were built
/// from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Allocate `n` items to parts proportional to `ratios` by largest-remainder
/// rounding. Remainder ties go to the lower part index.
pub(crate) fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let mut alloc: Vec<usize> = Vec::with_capacity(ratios.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(ratios.len());
    let mut assigned = 0usize;
    for (i, r) in ratios.iter().enumerate() {
        let quota = n as f64 * r;
        let floor = quota.floor() as usize;
        alloc.push(floor);
        assigned += floor;
        remainders.push((i, quota - floor as f64));
    }
    // Stable sort by descending remainder keeps the tie rule: lower index wins.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut leftover = n - assigned;
    for (i, _) in remainders {
        if leftover == 0 {
            break;
        }
        alloc[i] += 1;
        leftover -= 1;
    }
    alloc
}

/// Split products into train/validation/test, stratified by gold path.
///
/// Within every class the members are shuffled by a ChaCha stream seeded from
/// `seed`, then dealt to the three parts by largest-remainder rounding of the
/// class size against the ratios. When `small_to_train` is set (the default
/// in the pipeline), classes with fewer members than the three parts skip
/// rounding and go entirely to train.
pub fn stratified_split(
    products: &[Product],
    ratios: SplitRatios,
    seed: u64,
    small_to_train: bool,
) -> Result<DatasetSplit, CorpusError> {
    if products.is_empty() {
        return Err(CorpusError::EmptySplitInput);
    }
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in products.iter().enumerate() {
        by_class.entry(p.class()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for members in by_class.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        if small_to_train && members.len() < 3 {
            split.train.extend(members);
            continue;
        }
        let alloc = largest_remainder(members.len(), &ratios.as_array());
        let (train_n, val_n) = (alloc[0], alloc[1]);
        split.train.extend(&members[..train_n]);
        split.validation.extend(&members[train_n..train_n + val_n]);
        split.test.extend(&members[train_n + val_n..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Two-way stratified holdout: carve a validation share out of `indices`
/// (indices into `products`), stratified by class. Used to reserve a
/// validation slice inside a cross-validation fold's training part. Classes
/// with a single member stay in the retained part.
pub fn stratified_holdout(
    products: &[Product],
    indices: &[usize],
    holdout_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(products[i].class()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for members in by_class.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        if members.len() < 2 {
            kept.extend(members);
            continue;
        }
        let alloc = largest_remainder(members.len(), &[1.0 - holdout_fraction, holdout_fraction]);
        kept.extend(&members[..alloc[0]]);
        held.extend(&members[alloc[0]..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}
