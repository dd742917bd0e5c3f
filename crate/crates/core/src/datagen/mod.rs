//! Datasets: the in-memory record type, synthetic processes with analytic
//! ground truth, CSV ingestion and train/validation/test splitting.

mod csv_io;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, load_schema, read_header, write_csv, write_csv_to, Schema};
pub use split::{split, split_indices, Split, SplitSpec};
pub use synthetic::{
    cevae_true_ate, gen_cevae, gen_drvidal, CevaeProcess, DrVidalDraw, DrVidalProcess,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// Selects the reconstruction likelihood for a covariate column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Binary,
}

/// Covariates, treatment and outcomes for `n` subjects.
///
/// `t` holds exact `0.0`/`1.0` values. Optional columns are either absent or
/// have length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub covariate_names: Vec<String>,
    pub covariate_kinds: Vec<CovariateKind>,
    pub t: Vec<f64>,
    pub y_f: Vec<f64>,
    pub y_cf: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    pub e: Option<Vec<bool>>,
    pub outcome_kind: OutcomeKind,
}

impl Dataset {
    /// Dataset with continuous covariates named `x1..xd` and no optional columns.
    pub fn new(x: Tensor, t: Vec<f64>, y_f: Vec<f64>, outcome_kind: OutcomeKind) -> Result<Self> {
        x.require_rank2("Dataset::new")?;
        let d = x.cols();
        let ds = Dataset {
            x,
            covariate_names: (1..=d).map(|i| format!("x{i}")).collect(),
            covariate_kinds: vec![CovariateKind::Continuous; d],
            t,
            y_f,
            y_cf: None,
            mu0: None,
            mu1: None,
            e: None,
            outcome_kind,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let check = |name: &str, len: Option<usize>| -> Result<()> {
            match len {
                Some(l) if l != n => Err(Error::shape(
                    "Dataset",
                    format!("column {name} has {l} rows, covariates have {n}"),
                )),
                _ => Ok(()),
            }
        };
        check("t", Some(self.t.len()))?;
        check("y_f", Some(self.y_f.len()))?;
        check("y_cf", self.y_cf.as_ref().map(Vec::len))?;
        check("mu0", self.mu0.as_ref().map(Vec::len))?;
        check("mu1", self.mu1.as_ref().map(Vec::len))?;
        check("e", self.e.as_ref().map(Vec::len))?;
        if self.mu0.is_some() != self.mu1.is_some() {
            return Err(Error::invalid("mu0 and mu1 must be given together"));
        }
        if self.covariate_names.len() != self.x.cols() || self.covariate_kinds.len() != self.x.cols() {
            return Err(Error::shape("Dataset", "covariate metadata does not match width"));
        }
        validate_treatment(&self.t)
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Potential outcome under control, when it is known for every row.
    pub fn y0(&self) -> Option<Vec<f64>> {
        let y_cf = self.y_cf.as_ref()?;
        Some(
            self.t
                .iter()
                .zip(self.y_f.iter().zip(y_cf))
                .map(|(&t, (&f, &cf))| if t == 1.0 { cf } else { f })
                .collect(),
        )
    }

    /// Potential outcome under treatment, when it is known for every row.
    pub fn y1(&self) -> Option<Vec<f64>> {
        let y_cf = self.y_cf.as_ref()?;
        Some(
            self.t
                .iter()
                .zip(self.y_f.iter().zip(y_cf))
                .map(|(&t, (&f, &cf))| if t == 1.0 { f } else { cf })
                .collect(),
        )
    }

    /// Per-row ground-truth effect: `mu1 - mu0` when the noiseless means are
    /// available, otherwise the realized `y1 - y0`.
    pub fn true_effects(&self) -> Option<Vec<f64>> {
        if let (Some(m0), Some(m1)) = (&self.mu0, &self.mu1) {
            return Some(m1.iter().zip(m0).map(|(a, b)| a - b).collect());
        }
        let (y0, y1) = (self.y0()?, self.y1()?);
        Some(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(idx),
            covariate_names: self.covariate_names.clone(),
            covariate_kinds: self.covariate_kinds.clone(),
            t: pick(&self.t),
            y_f: pick(&self.y_f),
            y_cf: self.y_cf.as_ref().map(pick),
            mu0: self.mu0.as_ref().map(pick),
            mu1: self.mu1.as_ref().map(pick),
            e: self.e.as_ref().map(|e| idx.iter().map(|&i| e[i]).collect()),
            outcome_kind: self.outcome_kind,
        }
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1.0).count()
    }
}

pub(crate) fn validate_treatment(t: &[f64]) -> Result<()> {
    match t.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::invalid(format!(
            "treatment must be 0 or 1, row {i} has {}",
            t[i]
        ))),
        None => Ok(()),
    }
}
