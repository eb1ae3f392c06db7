//! Train/validation/test splitting. The test set is fixed once; validation is
//! a Monte-Carlo draw, with replacement, from the training pool.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WranglerError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    /// The training pool, in input order.
    pub train: Vec<String>,
    /// The current validation draw (a multiset over `train`).
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub validation_size: usize,
}

pub fn split_dataset(ids: &[String], test_fraction: f64, val_fraction: f64, seed: u64) -> Result<DatasetSplit, WranglerError> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(test_fraction) || !in_unit(val_fraction) || test_fraction + val_fraction >= 1.0 {
        return Err(WranglerError::InvalidArgument(format!(
            "fractions must lie in (0,1) and sum below 1, got test {test_fraction} and validation {val_fraction}"
        )));
    }
    let n = ids.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_test == 0 || n_val == 0 || n_test >= n {
        return Err(WranglerError::TooFewExamples { n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; n];
    for i in index::sample(&mut rng, n, n_test) {
        in_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = ids.iter().zip(&in_test).partition(|(_, t)| **t);
    let mut split = DatasetSplit {
        train: train.into_iter().map(|(id, _)| id.clone()).collect(),
        validation: Vec::new(),
        test: test.into_iter().map(|(id, _)| id.clone()).collect(),
        seed,
        validation_size: n_val,
    };
    split.validation = resample_validation(&split, 0);
    Ok(split)
}

/// A fresh validation multiset for one round; the same round seed always
/// gives the same draw.
pub fn resample_validation(split: &DatasetSplit, round_seed: u64) -> Vec<String> {
    if split.train.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed ^ round_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..split.validation_size)
        .map(|_| split.train[rng.gen_range(0..split.train.len())].clone())
        .collect()
}
