//! Repeated realizations of the full pipeline, ablations and reports.
//!
//! A run is a pure function of its [`ExperimentConfig`]: realization `r`
//! uses seed `base_seed + r` for data, splits, initialization and noise.

mod report;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfgan::GanConfig;
use crate::datagen::{OutcomeKind, Schema, SplitSpec};
use crate::drhead::DrConfig;
use crate::error::{Error, Result};
use crate::vae::VaeConfig;

pub use report::{compare_dr_vs_nondr, read_realizations_csv, write_report, Aggregate, Summary, WinCounts};
pub use run::{
    load_data, run_experiment, run_realization, score, train_generative, train_pipeline, GenerativeStage, Pipeline, RealizationRecord, RunResult,
    Scores,
};

/// Where realization data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// Binary proxy-confounder process with five covariates.
    Cevae { n: usize },
    /// Ten-covariate process with linear continuous outcomes.
    Drvidal { n: usize },
    /// One CSV file per realization. In `path`, `{realization}` expands to
    /// the zero-based realization index and `{realization1}` to the
    /// one-based index. Without a schema the layout written by `generate`
    /// is assumed.
    Csv {
        path: String,
        outcome: OutcomeKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<Schema>,
    },
}

impl DataSource {
    pub fn path_for(&self, realization: usize) -> Option<PathBuf> {
        match self {
            DataSource::Csv { path, .. } => Some(PathBuf::from(
                path.replace("{realization1}", &(realization + 1).to_string())
                    .replace("{realization}", &realization.to_string()),
            )),
            _ => None,
        }
    }
}

/// Split fractions; the split seed is the realization seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Fractions {
    pub fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train: self.train,
            validation: self.validation,
            test: self.test,
            seed,
        }
    }
}

/// Each flag zeroes one loss weight; architectures are unchanged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub without_dr_loss: bool,
    pub without_info_loss: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Ihdp,
    Jobs,
    Twins,
    Synthetic,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ihdp" => Ok(Preset::Ihdp),
            "jobs" => Ok(Preset::Jobs),
            "twins" => Ok(Preset::Twins),
            "synthetic" => Ok(Preset::Synthetic),
            other => Err(Error::invalid(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub realizations: usize,
    pub base_seed: u64,
    /// Run realizations on the rayon pool; results do not depend on it.
    #[serde(default = "yes")]
    pub parallel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub ablation: Ablation,
    pub data: DataSource,
    pub split: Fractions,
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub dr: DrConfig,
}

fn yes() -> bool {
    true
}

/// Column layout of the common headerless IHDP realization files.
fn ihdp_schema() -> Schema {
    let mut header: Vec<String> = ["t", "y_f", "y_cf", "mu0", "mu1"].map(String::from).to_vec();
    header.extend((1..=25).map(|i| format!("x{i}")));
    Schema {
        y_cfactual: Some("y_cf".into()),
        mu0: Some("mu0".into()),
        mu1: Some("mu1".into()),
        header: Some(header),
        ..Schema::default()
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let benchmark = Fractions {
            train: 0.56,
            validation: 0.24,
            test: 0.20,
        };
        let mut cfg = ExperimentConfig {
            name: String::new(),
            realizations: 10,
            base_seed: 1,
            parallel: true,
            output_dir: None,
            ablation: Ablation::default(),
            data: DataSource::Cevae { n: 10_000 },
            split: benchmark,
            vae: VaeConfig::default(),
            gan: GanConfig::default(),
            dr: DrConfig::default(),
        };
        let (name, lambda, batch) = match p {
            Preset::Ihdp => {
                cfg.data = DataSource::Csv {
                    path: "data/ihdp/ihdp_npci_{realization1}.csv".into(),
                    outcome: OutcomeKind::Continuous,
                    schema: Some(ihdp_schema()),
                };
                ("ihdp", 0.2, 64)
            }
            Preset::Jobs => {
                cfg.data = DataSource::Csv {
                    path: "data/jobs/jobs_{realization1}.csv".into(),
                    outcome: OutcomeKind::Binary,
                    schema: None,
                };
                ("jobs", 0.01, 64)
            }
            Preset::Twins => {
                cfg.data = DataSource::Csv {
                    path: "data/twins/twins_{realization1}.csv".into(),
                    outcome: OutcomeKind::Binary,
                    schema: None,
                };
                ("twins", 10.0, 256)
            }
            Preset::Synthetic => {
                cfg.split = Fractions {
                    train: 0.8,
                    validation: 0.0,
                    test: 0.2,
                };
                ("synthetic", 0.2, 64)
            }
        };
        cfg.name = name.into();
        cfg.gan.lambda = lambda;
        cfg.gan.batch_size = batch;
        cfg.dr.batch_size = batch;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::invalid("realizations must be at least 1"));
        }
        if self.base_seed.checked_add(self.realizations as u64).is_none() {
            return Err(Error::invalid("base_seed + realizations overflows"));
        }
        self.split.spec(0).validate()?;
        self.gan.validate()?;
        self.dr.hyper.validate()?;
        if self.dr.batch_size == 0 || self.dr.epochs == 0 {
            return Err(Error::invalid("DR batch size and epochs must be positive"));
        }
        if let DataSource::Cevae { n } | DataSource::Drvidal { n } = self.data {
            if n < 3 {
                return Err(Error::invalid(format!("synthetic sample size {n} is too small to split")));
            }
        }
        Ok(())
    }

    /// GAN settings with ablations applied.
    pub fn effective_gan(&self) -> GanConfig {
        let mut g = self.gan.clone();
        if self.ablation.without_info_loss {
            g.lambda = 0.0;
        }
        g
    }

    /// DR settings with ablations applied.
    pub fn effective_dr(&self) -> DrConfig {
        let mut d = self.dr.clone();
        if self.ablation.without_dr_loss {
            d.hyper.beta = 0.0;
        }
        d
    }

    pub fn seed_for(&self, realization: usize) -> u64 {
        self.base_seed + realization as u64
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: PathBuf::from("<string>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { message, .. } => Error::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// SHA-256 of the serialized config, lowercase hex. Execution settings
    /// that cannot change results (`parallel`, `output_dir`) are excluded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.parallel = true;
        canonical.output_dir = None;
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
