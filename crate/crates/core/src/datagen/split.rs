use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Train/validation/test fractions. Validation may be zero; train and test
/// must be positive; all three sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// 56/24/20, used for the semi-synthetic benchmarks.
    pub fn benchmark(seed: u64) -> Self {
        SplitSpec {
            train: 0.56,
            validation: 0.24,
            test: 0.20,
            seed,
        }
    }

    /// 80/0/20, used for the synthetic processes.
    pub fn synthetic(seed: u64) -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.0,
            test: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_open = |f: f64| f > 0.0 && f < 1.0;
        if !in_open(self.train) || !in_open(self.test) || !(0.0..1.0).contains(&self.validation) {
            return Err(Error::invalid(format!(
                "split fractions out of range: {}/{}/{}",
                self.train, self.validation, self.test
            )));
        }
        let total = self.train + self.validation + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions sum to {total}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled partition of `0..n`. Train and validation sizes are rounded;
/// the test split takes the remainder.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::invalid(format!("cannot split {n} rows")));
    }
    let n_train = ((n as f64 * spec.train).round() as usize).clamp(1, n - 1);
    let n_val = ((n as f64 * spec.validation).round() as usize).min(n - n_train - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(spec.seed, tags::SPLIT));
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        validation,
        test,
    })
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let s = split_indices(ds.n(), spec)?;
    Ok((ds.subset(&s.train), ds.subset(&s.validation), ds.subset(&s.test)))
}
