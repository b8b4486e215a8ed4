use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles `items` with the spec's seed and cuts them into train,
/// validation and test lists of the requested sizes.
pub fn split_dataset<T>(items: Vec<T>, spec: &SplitSpec) -> Result<Split<T>> {
    if spec.total() != items.len() {
        return Err(param_err!(
            "split counts {}+{}+{} do not sum to {} items",
            spec.train,
            spec.validation,
            spec.test,
            items.len()
        ));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter().map(|&i| slots[i].take().expect("indices are a permutation")).collect()
    };
    let (a, rest) = order.split_at(spec.train);
    let (b, c) = rest.split_at(spec.validation);
    Ok(Split {
        train: take(a),
        validation: take(b),
        test: take(c),
    })
}
