//! Gradient checks for every training loss on small random instances. Each
//! function returns the worst relative error per fixture.

use drvidal_core::autodiff::{Module, Tensor};
use drvidal_core::cfgan::{
    discriminator_loss, gan_losses, generator_loss, info_gradients, info_lower_bound, GanBatch, GanConfig, GanModels,
    LossWeights, Quadruples,
};
use drvidal_core::datagen::{gen_cevae, gen_drvidal, CovariateKind, Dataset};
use drvidal_core::drhead::{self, batch_losses, DrConfig, DrLoss, DrModel, Hyper};
use drvidal_core::rng::{standard_normal, stream};
use drvidal_core::vae::{self, elbo_loss, LatentNoise, VaeConfig, VaeModel};

use super::{jitter, max_gradient_error, mixed_covariates};

pub type Checks = Vec<(String, f64)>;

fn small_gan() -> GanConfig {
    GanConfig {
        noise_dim: 3,
        generator_shared: vec![6, 5],
        generator_head: vec![4],
        discriminator_hidden: vec![5, 4],
        q_hidden: vec![4, 4],
        ..GanConfig::default()
    }
}

fn small_dr() -> DrConfig {
    DrConfig {
        trunk_hidden: vec![6, 5],
        outcome_hidden: vec![4],
        propensity_hidden: vec![4],
        regressor_hidden: vec![5, 4],
        ..DrConfig::default()
    }
}

fn all_gan_parameters(m: &mut GanModels) -> Vec<&mut Tensor> {
    let mut v = m.generator.parameters_mut();
    v.extend(m.discriminator.parameters_mut());
    v.extend(m.q.parameters_mut());
    v
}

fn generator_and_q(m: &mut GanModels) -> Vec<&mut Tensor> {
    let mut v = m.generator.parameters_mut();
    v.extend(m.q.parameters_mut());
    v
}

fn gan_fixture(ds: &Dataset, seed: u64) -> (GanModels, GanBatch) {
    let cfg = small_gan();
    let mut models = GanModels::new(ds.d(), 8, ds.outcome_kind, &cfg, seed).unwrap();
    jitter(&mut models, all_gan_parameters, seed);
    let mut rng = stream(seed, 77);
    let batch = GanBatch {
        x: ds.x.clone(),
        t: ds.t.clone(),
        y_f: ds.y_f.clone(),
        z_g: standard_normal(ds.n(), cfg.noise_dim, &mut rng),
        z_c: standard_normal(ds.n(), 8, &mut rng),
    };
    (models, batch)
}

fn both_outcome_kinds(n: usize, seed: u64) -> [Dataset; 2] {
    [gen_cevae(n, seed).unwrap(), gen_drvidal(n, seed).unwrap()]
}

pub fn vae() -> Checks {
    let kinds = [
        CovariateKind::Continuous,
        CovariateKind::Continuous,
        CovariateKind::Continuous,
        CovariateKind::Binary,
        CovariateKind::Binary,
    ];
    let cfg = VaeConfig {
        encoder_hidden: vec![6, 5],
        decoder_hidden: vec![5, 6],
        ..VaeConfig::default()
    };
    [1, 2]
        .into_iter()
        .map(|seed| {
            let mut model = VaeModel::build(&kinds, &cfg, seed).unwrap();
            jitter(&mut model, VaeModel::parameters_mut, seed);
            let x = mixed_covariates(6, seed);
            let noise = LatentNoise::sample(6, model.latent_dims(), &mut stream(seed, 5));
            let (_, grads) = vae::loss_gradients(&model, &x, &noise).unwrap();
            let err = max_gradient_error(&model, VaeModel::parameters_mut, |m| elbo_loss(m, &x, &noise).unwrap().0, &grads);
            (format!("L_VAE seed {seed}"), err)
        })
        .collect()
}

pub fn discriminator() -> Checks {
    let w = LossWeights { lambda: 0.2, gamma: 1.0 };
    both_outcome_kinds(8, 3)
        .iter()
        .map(|ds| {
            let (models, batch) = gan_fixture(ds, 3);
            let (value, grads) = discriminator_loss(&models, &batch).unwrap();
            assert_eq!(value, gan_losses(&models, &batch, w).unwrap().discriminator);
            let err = max_gradient_error(
                &models,
                |m| m.discriminator.parameters_mut(),
                |m| gan_losses(m, &batch, w).unwrap().discriminator,
                &grads,
            );
            (format!("L^D {:?}", ds.outcome_kind), err)
        })
        .collect()
}

pub fn generator() -> Checks {
    let w = LossWeights { lambda: 0.7, gamma: 1.3 };
    both_outcome_kinds(8, 4)
        .iter()
        .map(|ds| {
            let (models, batch) = gan_fixture(ds, 4);
            let (_, grads) = generator_loss(&models, &batch, w).unwrap();
            let err = max_gradient_error(&models, generator_and_q, |m| gan_losses(m, &batch, w).unwrap().generator, &grads);
            (format!("L^G {:?}", ds.outcome_kind), err)
        })
        .collect()
}

pub fn info() -> Checks {
    let (models, _) = gan_fixture(&gen_drvidal(8, 5).unwrap(), 5);
    let mut rng = stream(5, 9);
    let pair = standard_normal(8, 2, &mut rng);
    let z_c = standard_normal(8, 8, &mut rng);
    let (value, grads) = info_gradients(&models.q, &pair, &z_c).unwrap();
    assert!((value - info_lower_bound(&models.q, &pair, &z_c).unwrap()).abs() < 1e-12);
    let err = max_gradient_error(
        &models.q,
        |q| q.parameters_mut(),
        |q| info_lower_bound(q, &pair, &z_c).unwrap(),
        &grads,
    );
    vec![("L_I".to_string(), err)]
}

pub fn doubly_robust() -> Checks {
    let hyper = Hyper {
        alpha: 0.8,
        beta: 1.7,
        ..Hyper::default()
    };
    let mut out = Vec::new();
    for ds in both_outcome_kinds(10, 6) {
        let q = Quadruples::from_true_counterfactuals(&ds).unwrap();
        let mut model = DrModel::build(ds.d(), ds.outcome_kind, &small_dr(), 6).unwrap();
        jitter(&mut model, DrModel::parameters_mut, 6);
        for (which, slot, name) in [
            (DrLoss::Predicted, 0usize, "L^p"),
            (DrLoss::DoublyRobust, 1, "L^DR"),
            (DrLoss::Ite, 2, "L^ITE"),
        ] {
            let (value, grads) = drhead::loss_gradients(&model, &q, &hyper, which).unwrap();
            let value_of = |m: &DrModel| {
                let (p, dr, ite) = batch_losses(m, &q, &hyper).unwrap();
                [p, dr, ite][slot]
            };
            assert_eq!(value, value_of(&model));
            let err = max_gradient_error(&model, DrModel::parameters_mut, value_of, &grads);
            out.push((format!("{name} {:?}", ds.outcome_kind), err));
        }
    }
    out
}

pub fn all() -> Checks {
    [vae(), discriminator(), generator(), info(), doubly_robust()].concat()
}
