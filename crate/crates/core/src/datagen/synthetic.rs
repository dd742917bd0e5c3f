//! Synthetic observational processes with known potential-outcome means.
//!
//! Second arguments of the conditional normals below are variances.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, OutcomeKind};
use crate::autodiff::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

fn bern<R: Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    // p is always a probability computed in this module.
    let b = Bernoulli::new(p.clamp(0.0, 1.0)).expect("probability in [0, 1]");
    if b.sample(rng) {
        1.0
    } else {
        0.0
    }
}

fn normal<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * z
}

fn require_rows(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::invalid("sample size must be at least 1"))
    } else {
        Ok(())
    }
}

/// Binary latent confounder `z` observed through noisy proxies:
///
/// ```text
/// z ~ Bern(0.5)
/// x_j | z ~ N(z, high² z + low² (1 - z))     j = 1..covariates
/// t | z ~ Bern(0.75 z + 0.25 (1 - z))
/// y | t, z ~ Bern(sigmoid(3 (z + 2 (2t - 1))))
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CevaeProcess {
    pub covariates: usize,
    pub sigma_high: f64,
    pub sigma_low: f64,
}

impl Default for CevaeProcess {
    fn default() -> Self {
        CevaeProcess {
            covariates: 5,
            sigma_high: 5.0,
            sigma_low: 3.0,
        }
    }
}

impl CevaeProcess {
    pub fn outcome_mean(z: f64, t: f64) -> f64 {
        sigmoid(3.0 * (z + 2.0 * (2.0 * t - 1.0)))
    }

    pub fn propensity(z: f64) -> f64 {
        0.75 * z + 0.25 * (1.0 - z)
    }

    /// Returns the dataset together with the latent `z` of every row.
    pub fn generate_with_latents(&self, n: usize, seed: u64) -> Result<(Dataset, Vec<f64>)> {
        require_rows(n)?;
        if self.covariates == 0 {
            return Err(Error::invalid("CEVAE process needs at least one covariate"));
        }
        let mut rng = rng::stream(seed, tags::DATA);
        let d = self.covariates;
        let mut x = Vec::with_capacity(n * d);
        let (mut t, mut y_f, mut y_cf, mut mu0, mut mu1, mut zs) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let (var_hi, var_lo) = (self.sigma_high.powi(2), self.sigma_low.powi(2));
        for _ in 0..n {
            let z = bern(0.5, &mut rng);
            let var = var_hi * z + var_lo * (1.0 - z);
            for _ in 0..d {
                x.push(normal(z, var, &mut rng));
            }
            let ti = bern(Self::propensity(z), &mut rng);
            let (m0, m1) = (Self::outcome_mean(z, 0.0), Self::outcome_mean(z, 1.0));
            let (mf, mcf) = if ti == 1.0 { (m1, m0) } else { (m0, m1) };
            y_f.push(bern(mf, &mut rng));
            y_cf.push(bern(mcf, &mut rng));
            t.push(ti);
            mu0.push(m0);
            mu1.push(m1);
            zs.push(z);
        }
        let mut ds = Dataset::new(
            Tensor::matrix(n, d, x)?,
            t,
            y_f,
            OutcomeKind::Binary,
        )?;
        ds.y_cf = Some(y_cf);
        ds.mu0 = Some(mu0);
        ds.mu1 = Some(mu1);
        Ok((ds, zs))
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.generate_with_latents(n, seed).map(|(ds, _)| ds)
    }
}

pub fn gen_cevae(n: usize, seed: u64) -> Result<Dataset> {
    CevaeProcess::default().generate(n, seed)
}

/// Population ATE of the default proxy process, averaging the two latent
/// strata with equal weight.
pub fn cevae_true_ate() -> f64 {
    let effect = |z: f64| CevaeProcess::outcome_mean(z, 1.0) - CevaeProcess::outcome_mean(z, 0.0);
    0.5 * effect(1.0) + 0.5 * effect(0.0)
}

/// Four independent Bernoulli latent blocks collated into ten covariates,
/// with a logistic treatment model and a linear two-column outcome model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrVidalProcess {
    /// Widths of the covariate, treatment, factual and counterfactual blocks.
    pub block_dims: [usize; 4],
    /// (variance when latent is 1, variance when latent is 0) per block.
    pub block_variances: [(f64, f64); 4],
    pub treatment_weight_range: f64,
    pub outcome_weight_range: f64,
    pub treatment_noise_var: f64,
    pub outcome_noise_var: f64,
    /// Replaces the random treatment weights when set.
    pub treatment_weights: Option<Vec<f64>>,
    /// Outcome column 0 is `y0` unless this is set.
    pub swap_outcome_columns: bool,
}

impl Default for DrVidalProcess {
    fn default() -> Self {
        DrVidalProcess {
            block_dims: [7, 1, 1, 1],
            block_variances: [(5.0, 3.0), (2.0, 0.5), (10.0, 6.0), (10.0, 6.0)],
            treatment_weight_range: 0.1,
            outcome_weight_range: 1.0,
            treatment_noise_var: 0.1,
            outcome_noise_var: 0.1,
            treatment_weights: None,
            swap_outcome_columns: false,
        }
    }
}

/// A generated dataset plus the weights that produced it.
#[derive(Clone, Debug)]
pub struct DrVidalDraw {
    pub dataset: Dataset,
    pub treatment_weights: Vec<f64>,
    /// `d × 2`; column `k` generates potential outcome `y_k`.
    pub outcome_weights: Tensor,
}

impl DrVidalProcess {
    pub fn covariates(&self) -> usize {
        self.block_dims.iter().sum()
    }

    pub fn draw(&self, n: usize, seed: u64) -> Result<DrVidalDraw> {
        require_rows(n)?;
        let d = self.covariates();
        let mut wrng = rng::stream(seed, tags::DATA_WEIGHTS);
        let w_t = match &self.treatment_weights {
            Some(w) if w.len() == d => w.clone(),
            Some(w) => {
                return Err(Error::invalid(format!(
                    "treatment weight override has {} entries, need {d}",
                    w.len()
                )))
            }
            None => {
                let r = self.treatment_weight_range;
                (0..d).map(|_| wrng.random_range(-r..r)).collect()
            }
        };
        let r = self.outcome_weight_range;
        let mut w_y: Vec<f64> = (0..d * 2).map(|_| wrng.random_range(-r..r)).collect();
        if self.swap_outcome_columns {
            for row in w_y.chunks_mut(2) {
                row.swap(0, 1);
            }
        }

        let mut rng = rng::stream(seed, tags::DATA);
        let noise_t = Normal::new(0.0, self.treatment_noise_var.sqrt())
            .map_err(|e| Error::invalid(format!("treatment noise: {e}")))?;
        let noise_y = Normal::new(0.0, self.outcome_noise_var.sqrt())
            .map_err(|e| Error::invalid(format!("outcome noise: {e}")))?;

        let mut x = Vec::with_capacity(n * d);
        let (mut t, mut y_f, mut y_cf, mut mu0, mut mu1) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        let mut row = vec![0.0; d];
        for _ in 0..n {
            let mut col = 0;
            for (dim, (v1, v0)) in self.block_dims.iter().zip(self.block_variances) {
                for _ in 0..*dim {
                    let z = bern(0.5, &mut rng);
                    row[col] = normal(z, v1 * z + v0 * (1.0 - z), &mut rng);
                    col += 1;
                }
            }
            let logit: f64 = w_t.iter().zip(&row).map(|(w, v)| w * v).sum::<f64>()
                + noise_t.sample(&mut rng);
            let ti = bern(sigmoid(logit), &mut rng);
            let m0: f64 = (0..d).map(|j| w_y[j * 2] * row[j]).sum();
            let m1: f64 = (0..d).map(|j| w_y[j * 2 + 1] * row[j]).sum();
            let y0 = m0 + noise_y.sample(&mut rng);
            let y1 = m1 + noise_y.sample(&mut rng);
            let (f, cf) = if ti == 1.0 { (y1, y0) } else { (y0, y1) };
            x.extend_from_slice(&row);
            t.push(ti);
            y_f.push(f);
            y_cf.push(cf);
            mu0.push(m0);
            mu1.push(m1);
        }
        let mut ds = Dataset::new(Tensor::matrix(n, d, x)?, t, y_f, OutcomeKind::Continuous)?;
        ds.y_cf = Some(y_cf);
        ds.mu0 = Some(mu0);
        ds.mu1 = Some(mu1);
        Ok(DrVidalDraw {
            dataset: ds,
            treatment_weights: w_t,
            outcome_weights: Tensor::matrix(d, 2, w_y)?,
        })
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.draw(n, seed).map(|d| d.dataset)
    }
}

pub fn gen_drvidal(n: usize, seed: u64) -> Result<Dataset> {
    DrVidalProcess::default().generate(n, seed)
}
