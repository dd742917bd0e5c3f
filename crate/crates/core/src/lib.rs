//! Counterfactual prediction and individualized treatment effect estimation.
//!
//! The pipeline has three learned stages:
//!
//! 1. [`vae`] factorizes covariates into four latent blocks (covariate,
//!    treatment, factual and counterfactual outcome factors).
//! 2. [`cfgan`] trains an information-regularized GAN on those latents to
//!    generate the missing potential outcome for every training row.
//! 3. [`drhead`] fits a four-headed doubly robust network on the completed
//!    records and predicts individual effects.
//!
//! [`datagen`] provides synthetic processes with known ground truth and CSV
//! ingestion; [`metrics`] scores predictions; [`experiment`] runs repeated
//! realizations, ablations and report generation.

pub mod autodiff;
pub mod cfgan;
pub mod datagen;
pub mod drhead;
mod error;
pub mod experiment;
pub mod metrics;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
