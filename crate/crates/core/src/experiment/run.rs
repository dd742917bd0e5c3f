use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataSource, ExperimentConfig};
use crate::cfgan::{complete_dataset, train_counterfactual_gan, Quadruples, TrainedGan};
use crate::datagen::{load_csv, read_header, split, CevaeProcess, Dataset, DrVidalProcess, Schema};
use crate::drhead::{potential_outcomes, train_dr, TrainedDr};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricSet};
use crate::vae::VaeModel;

/// Everything one realization trains and the data it was trained on.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub seed: u64,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub vae: VaeModel,
    pub gan: TrainedGan,
    pub quadruples: Quadruples,
    pub dr: TrainedDr,
}

/// In-sample metrics are on the training split, out-of-sample on the test
/// split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub in_sample: MetricSet,
    pub out_sample: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizationRecord {
    pub realization: usize,
    pub seed: u64,
    /// Scores, or the error message that aborted the realization.
    pub outcome: std::result::Result<Scores, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub records: Vec<RealizationRecord>,
    pub wall_clock_secs: f64,
}

impl RunResult {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn scores(&self) -> impl Iterator<Item = &Scores> {
        self.records.iter().filter_map(|r| r.outcome.as_ref().ok())
    }
}

pub fn load_data(cfg: &ExperimentConfig, realization: usize) -> Result<Dataset> {
    let seed = cfg.seed_for(realization);
    match &cfg.data {
        DataSource::Cevae { n } => CevaeProcess::default().generate(*n, seed),
        DataSource::Drvidal { n } => DrVidalProcess::default().generate(*n, seed),
        DataSource::Csv { outcome, schema, .. } => {
            let path = cfg.data.path_for(realization).expect("csv source has a path");
            let schema = match schema {
                Some(s) => s.clone(),
                None => Schema::detect(&read_header(&path, &Schema::default())?),
            };
            load_csv(&path, &schema, *outcome)
        }
    }
}

/// Data splits with the VAE and GAN co-trained on the training split.
#[derive(Clone, Debug)]
pub struct GenerativeStage {
    pub seed: u64,
    pub data: Dataset,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub vae: VaeModel,
    pub gan: TrainedGan,
}

pub fn train_generative(cfg: &ExperimentConfig, realization: usize) -> Result<GenerativeStage> {
    cfg.validate()?;
    let seed = cfg.seed_for(realization);
    let data = load_data(cfg, realization)?;
    let (train, validation, test) = split(&data, &cfg.split.spec(seed))?;
    let mut vae = VaeModel::build(&train.covariate_kinds, &cfg.vae, seed)?;
    let gan = train_counterfactual_gan(&train, &mut vae, &cfg.effective_gan(), seed)?;
    Ok(GenerativeStage {
        seed,
        data,
        train,
        validation,
        test,
        vae,
        gan,
    })
}

/// Loads and splits the data, co-trains the VAE and counterfactual GAN on
/// the training split, completes it and fits the doubly robust head.
pub fn train_pipeline(cfg: &ExperimentConfig, realization: usize) -> Result<Pipeline> {
    let stage = train_generative(cfg, realization)?;
    let GenerativeStage {
        seed,
        train,
        validation,
        test,
        vae,
        gan,
        ..
    } = stage;
    let quadruples = complete_dataset(&gan.models.generator, &vae, &train, seed)?;
    let dr = train_dr(&quadruples, Some(&validation), train.outcome_kind, &cfg.effective_dr(), seed)?;
    Ok(Pipeline {
        seed,
        train,
        validation,
        test,
        vae,
        gan,
        quadruples,
        dr,
    })
}

pub fn score(p: &Pipeline) -> Result<Scores> {
    let eval = |ds: &Dataset| -> Result<MetricSet> {
        let (y0, y1) = potential_outcomes(&p.dr.model, &ds.x)?;
        evaluate(ds, &y0, &y1)
    };
    Ok(Scores {
        in_sample: eval(&p.train)?,
        out_sample: eval(&p.test)?,
    })
}

pub fn run_realization(cfg: &ExperimentConfig, realization: usize) -> RealizationRecord {
    let outcome = train_pipeline(cfg, realization).and_then(|p| score(&p));
    RealizationRecord {
        realization,
        seed: cfg.seed_for(realization),
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

/// Runs every realization. Individual failures are recorded; more than half
/// failing fails the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let records: Vec<RealizationRecord> = if cfg.parallel {
        (0..cfg.realizations).into_par_iter().map(|r| run_realization(cfg, r)).collect()
    } else {
        (0..cfg.realizations).map(|r| run_realization(cfg, r)).collect()
    };
    let result = RunResult {
        config: cfg.clone(),
        fingerprint: cfg.fingerprint()?,
        records,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let failed = result.failed();
    if 2 * failed > cfg.realizations {
        let first = result
            .records
            .iter()
            .find_map(|r| r.outcome.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(Error::ExperimentFailed {
            failed,
            total: cfg.realizations,
            first,
        });
    }
    Ok(result)
}
