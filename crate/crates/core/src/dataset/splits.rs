use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_SUBJECTS: usize = 28;
pub const N_FOLDS: usize = 7;

/// Subject-wise partition for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

/// Seven folds over 28 subjects: the shuffled subjects form seven groups of
/// four; fold `k` tests on group `k`, validates on group `k + 1 (mod 7)` and
/// trains on the other twenty.
pub fn make_fold_splits(subject_ids: &[String], seed: u64) -> Result<Vec<FoldSplit>> {
    if subject_ids.len() != N_SUBJECTS {
        return Err(Error::Dataset(format!(
            "cross-validation needs exactly {N_SUBJECTS} subjects, got {}",
            subject_ids.len()
        )));
    }
    rotating_splits(subject_ids, N_FOLDS, seed)
}

/// The rotation scheme for any subject count divisible by `folds`.
pub fn rotating_splits(subject_ids: &[String], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let n = subject_ids.len();
    if folds < 3 || n % folds != 0 {
        return Err(Error::Dataset(format!(
            "{n} subjects cannot be split into {folds} equal groups"
        )));
    }
    let mut unique = subject_ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != n {
        return Err(Error::Dataset("duplicate subject ids".into()));
    }
    let mut shuffled = subject_ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let groups: Vec<&[String]> = shuffled.chunks(n / folds).collect();
    Ok((0..folds)
        .map(|k| {
            let val = (k + 1) % folds;
            FoldSplit {
                fold_index: k,
                test_subjects: groups[k].to_vec(),
                val_subjects: groups[val].to_vec(),
                train_subjects: groups
                    .iter()
                    .enumerate()
                    .filter(|(g, _)| *g != k && *g != val)
                    .flat_map(|(_, s)| s.iter().cloned())
                    .collect(),
            }
        })
        .collect())
}
