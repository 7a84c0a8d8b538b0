use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Random,
    Chronological,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub mode: SplitMode,
    pub seed: u64,
    /// Split of each segment, by segment index.
    pub assignment: Vec<Split>,
}

impl SplitSpec {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Partitions `n` time-ordered segments into train/valid/test.
///
/// Valid and test receive `floor(ratio · n)` segments (at least one each) and
/// train takes the remainder. Random mode shuffles indices with `seed`;
/// chronological mode assigns the earliest block to train, then valid, then
/// test.
pub fn make_splits(n: usize, ratios: [f64; 3], mode: SplitMode, seed: u64) -> Result<SplitSpec> {
    if n < 3 {
        return Err(Error::validation(format!("need at least 3 segments to split, got {n}")));
    }
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::validation(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let count = |r: f64| ((r * n as f64 + 1e-9).floor() as usize).max(1);
    let n_valid = count(ratios[1]);
    let n_test = count(ratios[2]);
    if n_valid + n_test >= n {
        return Err(Error::validation(format!(
            "{n} segments leave no training data for ratios {ratios:?}"
        )));
    }
    let n_train = n - n_valid - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    if mode == SplitMode::Random {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut assignment = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        assignment[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(SplitSpec {
        ratios,
        mode,
        seed,
        assignment,
    })
}
