use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{RealizationRecord, RunResult, Scores};
use crate::error::{Error, Result};
use crate::metrics::MetricSet;

type Getter = fn(&MetricSet) -> Option<f64>;

const METRICS: [(&str, Getter); 7] = [
    ("sqrt_pehe", |m| m.sqrt_pehe),
    ("ate_error", |m| m.ate_error),
    ("ate_abs_error", |m| m.ate_abs_error),
    ("policy_risk", |m| m.policy_risk),
    ("att_error", |m| m.att_error),
    ("factual_mse", |m| Some(m.factual_mse)),
    ("ate_estimate", |m| Some(m.ate_estimate)),
];

fn columns() -> Vec<String> {
    ["in", "out"]
        .iter()
        .flat_map(|side| METRICS.iter().map(move |(name, _)| format!("{side}_{name}")))
        .collect()
}

fn values(s: &Scores) -> Vec<Option<f64>> {
    [&s.in_sample, &s.out_sample]
        .iter()
        .flat_map(|m| METRICS.iter().map(move |(_, get)| get(m)))
        .collect()
}

fn metric_set(vals: &[Option<f64>]) -> Result<MetricSet> {
    let required = |v: Option<f64>| v.ok_or_else(|| Error::invalid("missing required metric"));
    Ok(MetricSet {
        sqrt_pehe: vals[0],
        ate_error: vals[1],
        ate_abs_error: vals[2],
        policy_risk: vals[3],
        att_error: vals[4],
        factual_mse: required(vals[5])?,
        ate_estimate: required(vals[6])?,
    })
}

/// Mean and population standard deviation over successful realizations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(v: &[f64]) -> Option<Aggregate> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Aggregate {
            mean,
            std: var.sqrt(),
            count: v.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub fingerprint: String,
    pub realizations: usize,
    pub failed: usize,
    /// Keyed `in_<metric>` / `out_<metric>`.
    pub metrics: BTreeMap<String, Aggregate>,
}

impl Summary {
    pub fn from_records(name: &str, fingerprint: &str, records: &[RealizationRecord]) -> Summary {
        let cols = columns();
        let rows: Vec<Vec<Option<f64>>> = records.iter().filter_map(|r| r.outcome.as_ref().ok()).map(values).collect();
        let metrics = cols
            .iter()
            .enumerate()
            .filter_map(|(j, c)| {
                let v: Vec<f64> = rows.iter().filter_map(|row| row[j]).collect();
                Aggregate::of(&v).map(|a| (c.clone(), a))
            })
            .collect();
        Summary {
            name: name.to_string(),
            fingerprint: fingerprint.to_string(),
            realizations: records.len(),
            failed: records.iter().filter(|r| r.outcome.is_err()).count(),
            metrics,
        }
    }

    pub fn of(res: &RunResult) -> Summary {
        Self::from_records(&res.config.name, &res.fingerprint, &res.records)
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::invalid(format!("cannot serialize report: {e}")))
}

/// Writes `realizations.csv`, `summary.toml` and `config.toml`, which depend
/// only on the config, plus `timing.toml` with the wall-clock time.
pub fn write_report(res: &RunResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let csv_path = dir.join("realizations.csv");
    let mut wr = csv::Writer::from_path(&csv_path).map_err(csv_err(&csv_path))?;
    let mut header = vec!["realization".to_string(), "seed".into(), "status".into()];
    header.extend(columns());
    header.push("error".into());
    wr.write_record(&header).map_err(csv_err(&csv_path))?;
    for r in &res.records {
        let mut row = vec![r.realization.to_string(), r.seed.to_string()];
        match &r.outcome {
            Ok(s) => {
                row.push("ok".into());
                row.extend(values(s).into_iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
                row.push(String::new());
            }
            Err(msg) => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 2 * METRICS.len()));
                row.push(msg.clone());
            }
        }
        wr.write_record(&row).map_err(csv_err(&csv_path))?;
    }
    wr.flush().map_err(|e| Error::io(&csv_path, e))?;

    let summary_path = dir.join("summary.toml");
    write_text(&summary_path, &to_toml(&Summary::of(res))?)?;
    let config_path = dir.join("config.toml");
    write_text(&config_path, &res.config.to_toml()?)?;

    #[derive(Serialize)]
    struct Timing {
        wall_clock_secs: f64,
    }
    let timing_path = dir.join("timing.toml");
    write_text(
        &timing_path,
        &to_toml(&Timing {
            wall_clock_secs: res.wall_clock_secs,
        })?,
    )?;
    Ok(vec![csv_path, summary_path, config_path, timing_path])
}

/// Parses a `realizations.csv` written by [`write_report`].
pub fn read_realizations_csv(path: impl AsRef<Path>) -> Result<Vec<RealizationRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let ncols = 2 * METRICS.len();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let cell = |message: String| Error::Cell {
            path: path.to_path_buf(),
            row: i + 2,
            column: String::new(),
            message,
        };
        if rec.len() != ncols + 4 {
            return Err(Error::RowLength {
                path: path.to_path_buf(),
                row: i + 2,
                found: rec.len(),
                expected: ncols + 4,
            });
        }
        let realization = rec[0].parse().map_err(|e| cell(format!("realization: {e}")))?;
        let seed = rec[1].parse().map_err(|e| cell(format!("seed: {e}")))?;
        let outcome = match &rec[2] {
            "ok" => {
                let vals = (0..ncols)
                    .map(|j| match &rec[3 + j] {
                        "" => Ok(None),
                        s => s.parse::<f64>().map(Some).map_err(|e| cell(format!("{s}: {e}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Scores {
                    in_sample: metric_set(&vals[..METRICS.len()])?,
                    out_sample: metric_set(&vals[METRICS.len()..])?,
                })
            }
            "failed" => Err(rec[ncols + 3].to_string()),
            other => return Err(cell(format!("unknown status `{other}`"))),
        };
        out.push(RealizationRecord {
            realization,
            seed,
            outcome,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCounts {
    pub first: usize,
    pub second: usize,
    pub ties: usize,
    /// Pairs where either side failed.
    pub skipped: usize,
}

impl WinCounts {
    /// Counts, pair by pair, which side has the lower error.
    pub fn from_errors(first: &[Option<f64>], second: &[Option<f64>]) -> Result<WinCounts> {
        if first.len() != second.len() {
            return Err(Error::invalid(format!(
                "unpaired results: {} vs {} realizations",
                first.len(),
                second.len()
            )));
        }
        let mut w = WinCounts::default();
        for (a, b) in first.iter().zip(second) {
            match (a, b) {
                (Some(a), Some(b)) if a < b => w.first += 1,
                (Some(a), Some(b)) if b < a => w.second += 1,
                (Some(_), Some(_)) => w.ties += 1,
                _ => w.skipped += 1,
            }
        }
        Ok(w)
    }
}

/// Win counts on per-realization out-of-sample factual error; `first` counts
/// realizations where `dr` is better.
pub fn compare_dr_vs_nondr(dr: &RunResult, nondr: &RunResult) -> Result<WinCounts> {
    if dr.records.len() != nondr.records.len()
        || dr.records.iter().zip(&nondr.records).any(|(a, b)| a.seed != b.seed)
    {
        return Err(Error::invalid("runs are not paired by seed"));
    }
    let errs = |r: &RunResult| -> Vec<Option<f64>> {
        r.records
            .iter()
            .map(|rec| rec.outcome.as_ref().ok().map(|s| s.out_sample.factual_mse))
            .collect()
    };
    WinCounts::from_errors(&errs(dr), &errs(nondr))
}
