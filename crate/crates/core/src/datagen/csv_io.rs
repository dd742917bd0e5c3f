use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CovariateKind, Dataset, OutcomeKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Maps CSV column names to dataset roles.
///
/// Optional roles that are named must exist in the file. When `covariates`
/// is absent every column not claimed by another role is a covariate, in
/// file order. When `binary_covariates` is absent a covariate is treated as
/// binary iff all its values are 0 or 1. `header` supplies column names for
/// files without a header row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub treatment: String,
    pub y_factual: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_cfactual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu0: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub randomized: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary_covariates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            treatment: "t".into(),
            y_factual: "y_f".into(),
            y_cfactual: None,
            mu0: None,
            mu1: None,
            randomized: None,
            covariates: None,
            binary_covariates: None,
            header: None,
        }
    }
}

impl Schema {
    /// The layout written by [`write_csv`], claiming each optional role only
    /// if the column is present in `header`.
    pub fn detect(header: &[String]) -> Self {
        let has = |c: &str| header.iter().any(|h| h == c).then(|| c.to_string());
        Schema {
            y_cfactual: has("y_cf"),
            mu0: has("mu0"),
            mu1: has("mu1"),
            randomized: has("e"),
            ..Schema::default()
        }
    }

    fn roles(&self) -> Vec<&str> {
        let mut r = vec![self.treatment.as_str(), self.y_factual.as_str()];
        for c in [&self.y_cfactual, &self.mu0, &self.mu1, &self.randomized]
            .into_iter()
            .flatten()
        {
            r.push(c);
        }
        r
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads the header row (or the schema-supplied header) of a CSV file.
pub fn read_header(path: impl AsRef<Path>, schema: &Schema) -> Result<Vec<String>> {
    let path = path.as_ref();
    if let Some(h) = &schema.header {
        return Ok(h.clone());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let h = rdr.headers().map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(h.iter().map(|s| s.trim().to_string()).collect())
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema, outcome_kind: OutcomeKind) -> Result<Dataset> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.header.is_none())
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = match &schema.header {
        Some(h) => h.clone(),
        None => rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_string)
            .collect(),
    };
    let index: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let locate = |name: &str| {
        index.get(name).copied().ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };

    let roles = schema.roles();
    let covariates: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => header
            .iter()
            .filter(|h| !roles.contains(&h.as_str()))
            .cloned()
            .collect(),
    };
    if covariates.is_empty() {
        return Err(Error::invalid(format!("{}: no covariate columns", path.display())));
    }
    let cov_idx = covariates
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>>>()?;
    let t_idx = locate(&schema.treatment)?;
    let yf_idx = locate(&schema.y_factual)?;
    let opt = |name: &Option<String>| name.as_deref().map(&locate).transpose();
    let ycf_idx = opt(&schema.y_cfactual)?;
    let mu0_idx = opt(&schema.mu0)?;
    let mu1_idx = opt(&schema.mu1)?;
    let e_idx = opt(&schema.randomized)?;

    let d = covariates.len();
    let mut x = Vec::new();
    let (mut t, mut y_f) = (Vec::new(), Vec::new());
    let (mut y_cf, mut mu0, mut mu1, mut e) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

    for (r, rec) in rdr.records().enumerate() {
        // 1-based data row numbers, counting the header line when present.
        let row = r + 1 + usize::from(schema.header.is_none());
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::RowLength {
                path: path.to_path_buf(),
                row,
                found: rec.len(),
                expected: header.len(),
            });
        }
        let cell = |i: usize| -> Result<f64> {
            let raw = &rec[i];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: header[i].clone(),
                    message: format!("`{raw}` is not a finite number"),
                }),
            }
        };
        let binary = |i: usize| -> Result<f64> {
            let v = cell(i)?;
            if v == 0.0 || v == 1.0 {
                Ok(v)
            } else {
                Err(Error::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: header[i].clone(),
                    message: format!("expected 0 or 1, found {v}"),
                })
            }
        };
        for &i in &cov_idx {
            x.push(cell(i)?);
        }
        t.push(binary(t_idx)?);
        y_f.push(cell(yf_idx)?);
        if let Some(i) = ycf_idx {
            y_cf.push(cell(i)?);
        }
        if let Some(i) = mu0_idx {
            mu0.push(cell(i)?);
        }
        if let Some(i) = mu1_idx {
            mu1.push(cell(i)?);
        }
        if let Some(i) = e_idx {
            e.push(binary(i)? == 1.0);
        }
    }

    let n = t.len();
    let x = Tensor::matrix(n, d, x)?;
    let covariate_kinds = (0..d)
        .map(|j| {
            let is_binary = match &schema.binary_covariates {
                Some(list) => list.contains(&covariates[j]),
                None => n > 0 && (0..n).all(|i| matches!(x.get(i, j), v if v == 0.0 || v == 1.0)),
            };
            if is_binary {
                CovariateKind::Binary
            } else {
                CovariateKind::Continuous
            }
        })
        .collect();
    let ds = Dataset {
        x,
        covariate_names: covariates,
        covariate_kinds,
        t,
        y_f,
        y_cf: ycf_idx.map(|_| y_cf),
        mu0: mu0_idx.map(|_| mu0),
        mu1: mu1_idx.map(|_| mu1),
        e: e_idx.map(|_| e),
        outcome_kind,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes covariates, then `t, y_f` and whichever of `y_cf, mu0, mu1, e`
/// are present. Values use the shortest representation that parses back to
/// the same `f64`.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    write_records(ds, &mut w).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

/// Same layout as [`write_csv`], to any writer.
pub fn write_csv_to<W: std::io::Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    write_records(ds, &mut w).map_err(|source| Error::Csv {
        path: "<stream>".into(),
        source,
    })
}

fn write_records<W: std::io::Write>(ds: &Dataset, w: &mut csv::Writer<W>) -> csv::Result<()> {
    let mut header: Vec<&str> = ds.covariate_names.iter().map(String::as_str).collect();
    header.extend(["t", "y_f"]);
    if ds.y_cf.is_some() {
        header.push("y_cf");
    }
    if ds.mu0.is_some() {
        header.extend(["mu0", "mu1"]);
    }
    if ds.e.is_some() {
        header.push("e");
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.x.row_values(i).iter().map(f64::to_string).collect();
        rec.push(ds.t[i].to_string());
        rec.push(ds.y_f[i].to_string());
        if let Some(v) = &ds.y_cf {
            rec.push(v[i].to_string());
        }
        if let (Some(m0), Some(m1)) = (&ds.mu0, &ds.mu1) {
            rec.push(m0[i].to_string());
            rec.push(m1[i].to_string());
        }
        if let Some(e) = &ds.e {
            rec.push(if e[i] { "1" } else { "0" }.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
