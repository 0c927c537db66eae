use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{cfg_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// One fold per subject, holding that subject out.
    Loso,
    /// A single seeded split into `train` and `test` subjects.
    Fixed { train: usize, test: usize },
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Loso => f.write_str("loso"),
            SplitMode::Fixed { .. } => f.write_str("fixed"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub folds: Vec<Fold>,
}

/// `fixed` parses to the 16/4 split; callers adjust the sizes.
impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loso" => Ok(SplitMode::Loso),
            "fixed" => Ok(SplitMode::Fixed { train: 16, test: 4 }),
            _ => Err(cfg_err!("split mode must be loso or fixed, got `{s}`")),
        }
    }
}

/// Folds over `subjects`, which are sorted first so input order never matters.
pub fn make_splits(subjects: &[String], mode: SplitMode, seed: u64) -> Result<SplitPlan> {
    let mut ids: Vec<String> = subjects.to_vec();
    ids.sort();
    ids.dedup();
    let folds = match mode {
        SplitMode::Loso => {
            if ids.len() < 2 {
                return Err(cfg_err!("leave-one-subject-out needs at least 2 subjects, have {}", ids.len()));
            }
            ids.iter()
                .map(|held| Fold {
                    train: ids.iter().filter(|s| *s != held).cloned().collect(),
                    test: vec![held.clone()],
                })
                .collect()
        }
        SplitMode::Fixed { train, test } => {
            if train == 0 || test == 0 || train + test > ids.len() {
                return Err(cfg_err!(
                    "fixed split {train}/{test} needs {} subjects, have {}",
                    train + test,
                    ids.len()
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            let mut tr = ids[..train].to_vec();
            let mut te = ids[train..train + test].to_vec();
            tr.sort();
            te.sort();
            vec![Fold { train: tr, test: te }]
        }
    };
    Ok(SplitPlan { mode, folds })
}
