//! Counterfactual outcome generation.
//!
//! The generator maps Gaussian noise `z_G` and the VAE latent `z_c` to a
//! potential-outcome pair `(y0, y1)`. Its factual slot is overwritten with the
//! observed outcome and the discriminator tries to recover the treatment from
//! `(x, ŷ0, ŷ1)`. An auxiliary network `Q` reconstructs `z_c` from the
//! generated pair, giving a variational lower bound on their mutual
//! information that the generator maximizes.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    collect_grads, Activation, AdamConfig, AdamState, BoundMlp, Graph, Mlp, Module, NodeId, Tensor,
};
use crate::datagen::{Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::vae::{self, LatentNoise, VaeModel};

/// Discriminator probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`
/// before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    /// Width of the generator noise `z_G`.
    pub noise_dim: usize,
    /// Hidden widths of the generator layers shared by both outcomes.
    pub generator_shared: Vec<usize>,
    /// Hidden widths of each outcome-specific generator head.
    pub generator_head: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    /// Weight of the mutual-information bound.
    pub lambda: f64,
    /// Weight of the supervised factual loss.
    pub gamma: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_vae: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Take one VAE step before every GAN step; otherwise the VAE is frozen.
    pub co_train_vae: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            noise_dim: 92,
            generator_shared: vec![100, 100],
            generator_head: vec![100, 100],
            discriminator_hidden: vec![30, 30, 30],
            q_hidden: vec![8, 8, 8],
            lambda: 0.2,
            gamma: 1.0,
            lr_generator: 1e-4,
            lr_discriminator: 5e-4,
            lr_vae: 1e-3,
            epochs: 300,
            batch_size: 64,
            co_train_vae: true,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid("noise width and batch size must be positive"));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::invalid("lambda and gamma must be non-negative"));
        }
        for lr in [self.lr_generator, self.lr_discriminator, self.lr_vae] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("learning rate {lr} is not a non-negative number")));
            }
        }
        Ok(())
    }
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(hidden);
    d.push(output);
    d
}

fn outcome_activation(kind: OutcomeKind) -> Activation {
    match kind {
        OutcomeKind::Continuous => Activation::Identity,
        OutcomeKind::Binary => Activation::Sigmoid,
    }
}

/// Shared layers followed by one head per potential outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    shared: Mlp,
    heads: [Mlp; 2],
    noise_dim: usize,
    latent_dim: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        noise_dim: usize,
        latent_dim: usize,
        kind: OutcomeKind,
        cfg: &GanConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shared_dims = vec![noise_dim + latent_dim];
        shared_dims.extend(&cfg.generator_shared);
        let shared = Mlp::relu_stack(&shared_dims, Activation::Relu, rng)?;
        let head_dims = dims(shared.output_dim(), &cfg.generator_head, 1);
        let last = outcome_activation(kind);
        let heads = [
            Mlp::relu_stack(&head_dims, last, rng)?,
            Mlp::relu_stack(&head_dims, last, rng)?,
        ];
        Ok(Generator {
            shared,
            heads,
            noise_dim,
            latent_dim,
        })
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn bind(&self, g: &mut Graph) -> [BoundMlp; 3] {
        [self.shared.bind(g), self.heads[0].bind(g), self.heads[1].bind(g)]
    }

    fn check_inputs(&self, z_g: &Tensor, z_c: &Tensor) -> Result<()> {
        z_g.require_rank2("generate")?;
        z_c.require_rank2("generate")?;
        if z_g.cols() != self.noise_dim || z_c.cols() != self.latent_dim || z_g.rows() != z_c.rows() {
            return Err(Error::shape(
                "generate",
                format!(
                    "noise {:?} and latent {:?}, expected widths {} and {}",
                    z_g.shape(),
                    z_c.shape(),
                    self.noise_dim,
                    self.latent_dim
                ),
            ));
        }
        Ok(())
    }

    /// `n × 2` pair node; column 0 is `y0`.
    fn forward(b: &[BoundMlp; 3], g: &mut Graph, z_g: NodeId, z_c: NodeId) -> Result<NodeId> {
        let input = g.concat_cols(&[z_g, z_c])?;
        let h = b[0].forward(g, input)?;
        let y0 = b[1].forward(g, h)?;
        let y1 = b[2].forward(g, h)?;
        g.concat_cols(&[y0, y1])
    }
}

impl Module for Generator {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut v = self.shared.parameters();
        v.extend(self.heads[0].parameters());
        v.extend(self.heads[1].parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let [h0, h1] = &mut self.heads;
        let mut v = self.shared.parameters_mut();
        v.extend(h0.parameters_mut());
        v.extend(h1.parameters_mut());
        v
    }
}

/// Predicts `P(t = 1 | x, ŷ0, ŷ1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    net: Mlp,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(covariates: usize, cfg: &GanConfig, rng: &mut R) -> Result<Self> {
        let net = Mlp::relu_stack(
            &dims(covariates + 2, &cfg.discriminator_hidden, 1),
            Activation::Sigmoid,
            rng,
        )?;
        Ok(Discriminator { net })
    }

    /// Clamped probabilities, `n × 1`.
    pub fn probability(&self, x: &Tensor, y0: &[f64], y1: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.net.bind(&mut g);
        let (xin, a, c) = (g.leaf(x.clone()), g.leaf(Tensor::column(y0)?), g.leaf(Tensor::column(y1)?));
        let p = discriminate(&b, &mut g, xin, a, c)?;
        Ok(g.value(p).clone())
    }
}

impl Module for Discriminator {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

fn discriminate(b: &BoundMlp, g: &mut Graph, x: NodeId, y0: NodeId, y1: NodeId) -> Result<NodeId> {
    let input = g.concat_cols(&[x, y0, y1])?;
    let p = b.forward(g, input)?;
    g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

/// Factored Gaussian posterior over `z_c` given the generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    net: Mlp,
    latent_dim: usize,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, cfg: &GanConfig, rng: &mut R) -> Result<Self> {
        let net = Mlp::relu_stack(&dims(2, &cfg.q_hidden, 2 * latent_dim), Activation::Identity, rng)?;
        Ok(QNetwork { net, latent_dim })
    }

    /// `(mean, log-variance)`, each `n × latent_dim`.
    pub fn posterior(&self, pair: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.net.bind(&mut g);
        let p = g.leaf(pair.clone());
        let (m, lv) = self.heads(&b, &mut g, p)?;
        Ok((g.value(m).clone(), g.value(lv).clone()))
    }

    fn heads(&self, b: &BoundMlp, g: &mut Graph, pair: NodeId) -> Result<(NodeId, NodeId)> {
        let out = b.forward(g, pair)?;
        let k = self.latent_dim;
        Ok((g.slice_cols(out, 0, k)?, g.slice_cols(out, k, 2 * k)?))
    }
}

impl Module for QNetwork {
    fn parameters(&self) -> Vec<&Tensor> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.parameters_mut()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanModels {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub q: QNetwork,
}

impl GanModels {
    pub fn new(covariates: usize, latent_dim: usize, kind: OutcomeKind, cfg: &GanConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, tags::GAN_INIT);
        Ok(GanModels {
            generator: Generator::new(cfg.noise_dim, latent_dim, kind, cfg, &mut rng)?,
            discriminator: Discriminator::new(covariates, cfg, &mut rng)?,
            q: QNetwork::new(latent_dim, cfg, &mut rng)?,
        })
    }
}

/// One mini-batch of GAN inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GanBatch {
    pub x: Tensor,
    pub t: Vec<f64>,
    pub y_f: Vec<f64>,
    pub z_g: Tensor,
    pub z_c: Tensor,
}

impl GanBatch {
    fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if n == 0 {
            return Err(Error::invalid("empty GAN batch"));
        }
        if self.t.len() != n || self.y_f.len() != n || self.z_g.rows() != n || self.z_c.rows() != n {
            return Err(Error::shape("GanBatch", "row counts disagree"));
        }
        crate::datagen::validate_treatment(&self.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
}

/// All loss values for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub v_gan: f64,
    pub discriminator: f64,
    pub generator: f64,
    pub supervised: f64,
    pub info: f64,
}

/// `ȳ = G(z_G, z_c)` as an `n × 2` tensor with `y0` in column 0.
pub fn generate(gen: &Generator, z_g: &Tensor, z_c: &Tensor) -> Result<Tensor> {
    gen.check_inputs(z_g, z_c)?;
    let mut g = Graph::new();
    let b = gen.bind(&mut g);
    let (a, c) = (g.leaf(z_g.clone()), g.leaf(z_c.clone()));
    let out = Generator::forward(&b, &mut g, a, c)?;
    Ok(g.value(out).clone())
}

/// Overwrites the factual slot of each generated pair with `y_f`.
pub fn replace_factual(pair: &Tensor, t: &[f64], y_f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    pair.require_rank2("replace_factual")?;
    if pair.cols() != 2 || pair.rows() != t.len() || t.len() != y_f.len() {
        return Err(Error::shape(
            "replace_factual",
            format!("pair {:?}, {} treatments, {} outcomes", pair.shape(), t.len(), y_f.len()),
        ));
    }
    crate::datagen::validate_treatment(t)?;
    let mut y0 = Vec::with_capacity(t.len());
    let mut y1 = Vec::with_capacity(t.len());
    for (i, (&ti, &f)) in t.iter().zip(y_f).enumerate() {
        if ti == 1.0 {
            y0.push(pair.get(i, 0));
            y1.push(f);
        } else {
            y0.push(f);
            y1.push(pair.get(i, 1));
        }
    }
    Ok((y0, y1))
}

/// Batch mean of `t log D + (1 - t) log(1 - D)` with `D = dsc(x, ŷ0, ŷ1)`.
pub fn v_gan(dsc: &Discriminator, x: &Tensor, y0: &[f64], y1: &[f64], t: &[f64]) -> Result<f64> {
    let d = dsc.probability(x, y0, y1)?;
    if d.rows() != t.len() {
        return Err(Error::shape("v_gan", format!("{} rows vs {} treatments", d.rows(), t.len())));
    }
    Ok(t.iter()
        .zip(d.data())
        .map(|(&ti, &p)| ti * p.ln() + (1.0 - ti) * (1.0 - p).ln())
        .sum::<f64>()
        / t.len() as f64)
}

/// Mean squared error between observed and predicted factual outcomes.
pub fn supervised_loss(y_f: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y_f.len() != y_hat.len() || y_f.is_empty() {
        return Err(Error::shape("supervised_loss", format!("{} vs {}", y_f.len(), y_hat.len())));
    }
    Ok(y_f.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y_f.len() as f64)
}

/// Mean over rows of `log N(z; mean, exp(logvar))`, summed over columns.
pub fn factored_gaussian_log_density(z: &Tensor, mean: &Tensor, logvar: &Tensor) -> Result<f64> {
    if z.shape() != mean.shape() || z.shape() != logvar.shape() {
        return Err(Error::shape(
            "factored_gaussian_log_density",
            format!("{:?}, {:?}, {:?}", z.shape(), mean.shape(), logvar.shape()),
        ));
    }
    let total: f64 = z
        .data()
        .iter()
        .zip(mean.data())
        .zip(logvar.data())
        .map(|((&zi, &m), &lv)| -0.5 * (2.0 * PI).ln() - 0.5 * lv - 0.5 * (zi - m).powi(2) / lv.exp())
        .sum();
    Ok(total / z.rows().max(1) as f64)
}

/// Variational mutual-information bound `L_I` of `z_c` given the pair.
pub fn info_lower_bound(q: &QNetwork, pair: &Tensor, z_c: &Tensor) -> Result<f64> {
    let (mean, logvar) = q.posterior(pair)?;
    factored_gaussian_log_density(z_c, &mean, &logvar)
}

fn column_leaf(g: &mut Graph, v: &[f64]) -> Result<NodeId> {
    Ok(g.leaf(Tensor::column(v)?))
}

fn log_density_node(g: &mut Graph, z: NodeId, mean: NodeId, logvar: NodeId) -> Result<NodeId> {
    let (n, k) = (g.value(z).rows(), g.value(z).cols());
    let diff = g.sub(z, mean)?;
    let sq = g.square(diff)?;
    let neg_lv = g.neg(logvar)?;
    let precision = g.exp(neg_lv)?;
    let quad = g.mul(sq, precision)?;
    let s = g.add(quad, logvar)?;
    let s = g.sum(s)?;
    let s = g.scale(s, -0.5 / n as f64)?;
    g.offset(s, -0.5 * k as f64 * (2.0 * PI).ln())
}

/// Nodes of one full forward pass used by both update steps.
struct Forward {
    v_gan: NodeId,
    adversarial: NodeId,
    supervised: NodeId,
    info: NodeId,
}

struct Bound {
    gen: [BoundMlp; 3],
    dsc: BoundMlp,
    q: BoundMlp,
}

impl Bound {
    fn new(models: &GanModels, g: &mut Graph) -> Self {
        Bound {
            gen: models.generator.bind(g),
            dsc: models.discriminator.net.bind(g),
            q: models.q.net.bind(g),
        }
    }

    fn generator_nodes(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.gen.iter().flat_map(|b| b.nodes().to_vec()).collect();
        v.extend_from_slice(self.q.nodes());
        v
    }
}

/// Records every loss term. When `detach_generator` is set the generated pair
/// enters the discriminator as a constant.
fn forward(models: &GanModels, b: &Bound, g: &mut Graph, batch: &GanBatch, detach_generator: bool) -> Result<Forward> {
    batch.validate()?;
    models.generator.check_inputs(&batch.z_g, &batch.z_c)?;
    let n = batch.t.len() as f64;
    let t_c: Vec<f64> = batch.t.iter().map(|t| 1.0 - t).collect();
    let t = column_leaf(g, &batch.t)?;
    let tc = column_leaf(g, &t_c)?;
    let z_g = g.leaf(batch.z_g.clone());
    let z_c = g.leaf(batch.z_c.clone());
    let pair = Generator::forward(&b.gen, g, z_g, z_c)?;
    let pair = if detach_generator {
        g.leaf(g.value(pair).clone())
    } else {
        pair
    };
    let y0 = g.slice_cols(pair, 0, 1)?;
    let y1 = g.slice_cols(pair, 1, 2)?;

    // ŷ0 = (1 - t) y_f + t y0 and ŷ1 = t y_f + (1 - t) y1.
    let yf_ctrl: Vec<f64> = batch.y_f.iter().zip(&t_c).map(|(y, c)| y * c).collect();
    let yf_trt: Vec<f64> = batch.y_f.iter().zip(&batch.t).map(|(y, t)| y * t).collect();
    let a = g.mul(t, y0)?;
    let c = column_leaf(g, &yf_ctrl)?;
    let y0_hat = g.add(c, a)?;
    let a = g.mul(tc, y1)?;
    let c = column_leaf(g, &yf_trt)?;
    let y1_hat = g.add(c, a)?;

    let x = g.leaf(batch.x.clone());
    let d = discriminate(&b.dsc, g, x, y0_hat, y1_hat)?;
    let log_d = g.log(d)?;
    let one_minus = g.neg(d)?;
    let one_minus = g.offset(one_minus, 1.0)?;
    let log_1md = g.log(one_minus)?;

    let a = g.mul(t, log_d)?;
    let c = g.mul(tc, log_1md)?;
    let s = g.add(a, c)?;
    let v_gan = g.mean(s)?;

    // Non-saturating generator term with the treatment labels flipped.
    let a = g.mul(t, log_1md)?;
    let c = g.mul(tc, log_d)?;
    let s = g.add(a, c)?;
    let s = g.sum(s)?;
    let adversarial = g.scale(s, -1.0 / n)?;

    let a = g.mul(t, y1)?;
    let c = g.mul(tc, y0)?;
    let yf_hat = g.add(a, c)?;
    let yf = column_leaf(g, &batch.y_f)?;
    let r = g.sub(yf_hat, yf)?;
    let r = g.square(r)?;
    let supervised = g.mean(r)?;

    let (qm, qlv) = models.q.heads(&b.q, g, pair)?;
    let info = log_density_node(g, z_c, qm, qlv)?;

    Ok(Forward {
        v_gan,
        adversarial,
        supervised,
        info,
    })
}

fn generator_objective(g: &mut Graph, f: &Forward, w: LossWeights) -> Result<NodeId> {
    let s = g.scale(f.supervised, w.gamma)?;
    let i = g.scale(f.info, -w.lambda)?;
    let l = g.add(f.adversarial, s)?;
    g.add(l, i)
}

/// Evaluates every loss on one batch without updating anything.
pub fn gan_losses(models: &GanModels, batch: &GanBatch, w: LossWeights) -> Result<GanLosses> {
    let mut g = Graph::new();
    let b = Bound::new(models, &mut g);
    let f = forward(models, &b, &mut g, batch, false)?;
    let l_g = generator_objective(&mut g, &f, w)?;
    let v = g.value(f.v_gan).item()?;
    Ok(GanLosses {
        v_gan: v,
        discriminator: -v,
        generator: g.value(l_g).item()?,
        supervised: g.value(f.supervised).item()?,
        info: g.value(f.info).item()?,
    })
}

/// `L^D = -V_GAN` and its gradient with respect to the discriminator.
pub fn discriminator_loss(models: &GanModels, batch: &GanBatch) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = Bound::new(models, &mut g);
    let f = forward(models, &b, &mut g, batch, true)?;
    let loss = g.neg(f.v_gan)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, collect_grads(&grads, b.dsc.nodes())))
}

/// `L^G` and its gradient with respect to generator then Q parameters.
pub fn generator_loss(models: &GanModels, batch: &GanBatch, w: LossWeights) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = Bound::new(models, &mut g);
    let f = forward(models, &b, &mut g, batch, false)?;
    let loss = generator_objective(&mut g, &f, w)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, collect_grads(&grads, &b.generator_nodes())))
}

/// `L_I` and its gradient with respect to the Q network, for a fixed pair.
pub fn info_gradients(q: &QNetwork, pair: &Tensor, z_c: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = q.net.bind(&mut g);
    let p = g.leaf(pair.clone());
    let z = g.leaf(z_c.clone());
    let (m, lv) = q.heads(&b, &mut g, p)?;
    let info = log_density_node(&mut g, z, m, lv)?;
    let grads = g.backward(info)?;
    Ok((g.value(info).item()?, collect_grads(&grads, b.nodes())))
}

/// Adam states for the discriminator and for the generator together with Q.
#[derive(Clone, Debug)]
pub struct GanOptimizers {
    pub discriminator: AdamState,
    pub generator: AdamState,
}

impl GanOptimizers {
    pub fn new(models: &GanModels, cfg: &GanConfig) -> Self {
        let mut gen_params = models.generator.parameters();
        gen_params.extend(models.q.parameters());
        GanOptimizers {
            discriminator: AdamState::for_module(&models.discriminator, AdamConfig::with_lr(cfg.lr_discriminator)),
            generator: AdamState::new(&gen_params, AdamConfig::with_lr(cfg.lr_generator)),
        }
    }
}

/// One discriminator update. Generator and Q are only read.
pub fn discriminator_step(models: &mut GanModels, opt: &mut AdamState, batch: &GanBatch) -> Result<f64> {
    let (loss, grads) = discriminator_loss(models, batch)?;
    opt.step(models.discriminator.parameters_mut(), &grads)?;
    Ok(loss)
}

/// One joint generator and Q update. The discriminator is only read.
pub fn generator_step(
    models: &mut GanModels,
    opt: &mut AdamState,
    batch: &GanBatch,
    w: LossWeights,
) -> Result<f64> {
    let (loss, grads) = generator_loss(models, batch, w)?;
    let GanModels { generator, q, .. } = models;
    let mut params = generator.parameters_mut();
    params.extend(q.parameters_mut());
    opt.step(params, &grads)?;
    Ok(loss)
}

/// Epoch means of the training losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub vae: f64,
    pub discriminator: f64,
    pub generator: f64,
    pub supervised: f64,
    pub info: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedGan {
    pub models: GanModels,
    pub history: Vec<GanEpoch>,
}

/// Alternates, per mini-batch, a VAE step (when co-training), a
/// discriminator step on the detached generator output and a joint
/// generator/Q step on the same noise.
pub fn train_counterfactual_gan(ds: &Dataset, vae_model: &mut VaeModel, cfg: &GanConfig, seed: u64) -> Result<TrainedGan> {
    cfg.validate()?;
    ds.validate()?;
    let latent = vae_model.latent_dims();
    let mut models = GanModels::new(ds.d(), latent.total(), ds.outcome_kind, cfg, seed)?;
    let mut opts = GanOptimizers::new(&models, cfg);
    let mut vae_opt = vae::new_optimizer(vae_model, cfg.lr_vae);
    let mut batch_rng = rng::stream(seed, tags::BATCHES);
    let mut noise_rng = rng::stream(seed, tags::GAN_NOISE);
    let mut vae_rng = rng::stream(seed, tags::VAE_NOISE);
    let w = LossWeights {
        lambda: cfg.lambda,
        gamma: cfg.gamma,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = GanEpoch::default();
        let batches = rng::shuffled_batches(ds.n(), cfg.batch_size, &mut batch_rng);
        for idx in &batches {
            let x = ds.x.select_rows(idx);
            let noise = LatentNoise::sample(idx.len(), latent, &mut vae_rng);
            let z_c = if cfg.co_train_vae {
                let step = vae::vae_train_step(vae_model, &mut vae_opt, &x, &noise)?;
                acc.vae += step.loss;
                step.z_c
            } else {
                let post = vae_model.encode(&x)?;
                let mut parts = Vec::with_capacity(vae::BLOCKS);
                for ((m, s), e) in post.means.iter().zip(&post.sigmas).zip(&noise.0) {
                    parts.push(vae::reparameterize(m, s, e)?);
                }
                concat(&parts)?
            };
            let batch = GanBatch {
                x,
                t: idx.iter().map(|&i| ds.t[i]).collect(),
                y_f: idx.iter().map(|&i| ds.y_f[i]).collect(),
                z_g: rng::standard_normal(idx.len(), cfg.noise_dim, &mut noise_rng),
                z_c,
            };
            acc.discriminator += discriminator_step(&mut models, &mut opts.discriminator, &batch)
                .map_err(|e| annotate(e, epoch, "discriminator"))?;
            acc.generator += generator_step(&mut models, &mut opts.generator, &batch, w)
                .map_err(|e| annotate(e, epoch, "generator"))?;
            let after = gan_losses(&models, &batch, w)?;
            acc.supervised += after.supervised;
            acc.info += after.info;
        }
        let k = batches.len().max(1) as f64;
        history.push(GanEpoch {
            vae: acc.vae / k,
            discriminator: acc.discriminator / k,
            generator: acc.generator / k,
            supervised: acc.supervised / k,
            info: acc.info / k,
        });
    }
    Ok(TrainedGan { models, history })
}

fn annotate(e: Error, epoch: usize, stage: &str) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{stage} step in epoch {epoch}: {context}"),
        },
        other => other,
    }
}

fn concat(parts: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = parts.iter().map(|p| g.leaf(p.clone())).collect();
    let c = g.concat_cols(&ids)?;
    Ok(g.value(c).clone())
}

/// Observed records completed with a generated counterfactual outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruples {
    pub x: Tensor,
    pub covariate_names: Vec<String>,
    pub t: Vec<f64>,
    pub y_f: Vec<f64>,
    pub y_cf: Vec<f64>,
}

impl Quadruples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Quadruples {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Quadruples {
            x: self.x.select_rows(idx),
            covariate_names: self.covariate_names.clone(),
            t: pick(&self.t),
            y_f: pick(&self.y_f),
            y_cf: pick(&self.y_cf),
        }
    }

    /// Uses the dataset's own counterfactual column; for tests and oracles.
    pub fn from_true_counterfactuals(ds: &Dataset) -> Result<Quadruples> {
        let y_cf = ds
            .y_cf
            .clone()
            .ok_or_else(|| Error::invalid("dataset has no counterfactual outcomes"))?;
        Ok(Quadruples {
            x: ds.x.clone(),
            covariate_names: ds.covariate_names.clone(),
            t: ds.t.clone(),
            y_f: ds.y_f.clone(),
            y_cf,
        })
    }

    /// Columns: covariates, `t`, `y_f`, `y_cf`.
    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let path = Path::new("<writer>");
        let mut wr = csv::Writer::from_writer(w);
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut header = self.covariate_names.clone();
        header.extend(["t", "y_f", "y_cf"].map(String::from));
        wr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row_values(i).iter().map(f64::to_string).collect();
            rec.extend([self.t[i], self.y_f[i], self.y_cf[i]].map(|v| v.to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file)).map_err(|e| match e {
            Error::Csv { source, .. } => Error::Csv {
                path: path.to_path_buf(),
                source,
            },
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }
}

/// Generates the missing outcome of every row from posterior-mean latents
/// and fresh generator noise drawn from `seed`.
pub fn complete_dataset(gen: &Generator, vae_model: &VaeModel, ds: &Dataset, seed: u64) -> Result<Quadruples> {
    let pair = generated_pairs(gen, vae_model, ds, seed)?;
    let y_cf = ds
        .t
        .iter()
        .enumerate()
        .map(|(i, &t)| if t == 1.0 { pair.get(i, 0) } else { pair.get(i, 1) })
        .collect();
    Ok(Quadruples {
        x: ds.x.clone(),
        covariate_names: ds.covariate_names.clone(),
        t: ds.t.clone(),
        y_f: ds.y_f.clone(),
        y_cf,
    })
}

/// Raw generator output for every row of `ds`, as used by [`complete_dataset`].
pub fn generated_pairs(gen: &Generator, vae_model: &VaeModel, ds: &Dataset, seed: u64) -> Result<Tensor> {
    let z_c = vae_model.encode(&ds.x)?.mean_latent()?;
    let z_g = rng::standard_normal(ds.n(), gen.noise_dim(), &mut rng::stream(seed, tags::COMPLETE));
    let pair = generate(gen, &z_g, &z_c)?;
    pair.ensure_finite("generated outcomes")?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_cevae;
    use crate::vae::VaeConfig;

    fn small_cfg() -> GanConfig {
        GanConfig {
            noise_dim: 3,
            generator_shared: vec![6],
            generator_head: vec![5],
            discriminator_hidden: vec![4],
            q_hidden: vec![4],
            ..GanConfig::default()
        }
    }

    fn batch(n: usize, d: usize, models: &GanModels, seed: u64) -> GanBatch {
        let mut r = rng::stream(seed, 99);
        GanBatch {
            x: rng::standard_normal(n, d, &mut r),
            t: (0..n).map(|i| (i % 2) as f64).collect(),
            y_f: (0..n).map(|i| i as f64 * 0.3 - 0.5).collect(),
            z_g: rng::standard_normal(n, models.generator.noise_dim(), &mut r),
            z_c: rng::standard_normal(n, models.generator.latent_dim(), &mut r),
        }
    }

    #[test]
    fn default_generator_shapes() {
        let m = GanModels::new(25, 8, OutcomeKind::Continuous, &GanConfig::default(), 1).unwrap();
        let mut r = rng::stream(1, 0);
        let out = generate(&m.generator, &rng::standard_normal(64, 92, &mut r), &rng::standard_normal(64, 8, &mut r)).unwrap();
        assert_eq!(out.shape(), &[64, 2]);
        assert!(generate(&m.generator, &Tensor::zeros(&[64, 91]), &Tensor::zeros(&[64, 8])).is_err());
    }

    #[test]
    fn zero_generator_outputs_zero_pair() {
        let mut m = GanModels::new(3, 8, OutcomeKind::Continuous, &GanConfig::default(), 1).unwrap();
        m.generator.zero_parameters();
        let out = generate(&m.generator, &Tensor::full(&[4, 92], 1.0), &Tensor::full(&[4, 8], 2.0)).unwrap();
        assert_eq!(out, Tensor::zeros(&[4, 2]));
    }

    #[test]
    fn binary_generator_outputs_probabilities() {
        let m = GanModels::new(3, 8, OutcomeKind::Binary, &GanConfig::default(), 2).unwrap();
        let mut r = rng::stream(2, 0);
        let out = generate(&m.generator, &rng::standard_normal(50, 92, &mut r), &rng::standard_normal(50, 8, &mut r)).unwrap();
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn replace_factual_fixtures() {
        let pair = Tensor::matrix(2, 2, vec![2.0, 9.0, 2.0, 9.0]).unwrap();
        let (y0, y1) = replace_factual(&pair, &[1.0, 0.0], &[5.0, 5.0]).unwrap();
        assert_eq!((y0[0], y1[0]), (2.0, 5.0));
        assert_eq!((y0[1], y1[1]), (5.0, 9.0));
        assert!(replace_factual(&pair, &[0.5, 0.0], &[5.0, 5.0]).is_err());
    }

    #[test]
    fn constant_half_discriminator_gives_log_half() {
        let mut m = GanModels::new(2, 8, OutcomeKind::Continuous, &small_cfg(), 1).unwrap();
        m.discriminator.zero_parameters();
        let x = Tensor::zeros(&[3, 2]);
        let v = v_gan(&m.discriminator, &x, &[0.0; 3], &[1.0; 3], &[1.0, 0.0, 1.0]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 0.6931).abs() < 1e-4);
    }

    #[test]
    fn supervised_fixture() {
        assert_eq!(supervised_loss(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert_eq!(supervised_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn log_density_at_mean() {
        let z = Tensor::full(&[3, 8], 0.7);
        let v = factored_gaussian_log_density(&z, &z, &Tensor::zeros(&[3, 8])).unwrap();
        assert!((v + 4.0 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 7.3515).abs() < 1e-3);
    }

    #[test]
    fn loss_values_agree_with_pure_functions() {
        let m = GanModels::new(2, 8, OutcomeKind::Continuous, &small_cfg(), 4).unwrap();
        let b = batch(6, 2, &m, 4);
        let w = LossWeights { lambda: 0.3, gamma: 0.7 };
        let l = gan_losses(&m, &b, w).unwrap();
        let pair = generate(&m.generator, &b.z_g, &b.z_c).unwrap();
        let (y0, y1) = replace_factual(&pair, &b.t, &b.y_f).unwrap();
        let v = v_gan(&m.discriminator, &b.x, &y0, &y1, &b.t).unwrap();
        assert!((l.v_gan - v).abs() < 1e-12);
        let info = info_lower_bound(&m.q, &pair, &b.z_c).unwrap();
        assert!((l.info - info).abs() < 1e-12);
        let yf_hat: Vec<f64> = (0..6).map(|i| if b.t[i] == 1.0 { pair.get(i, 1) } else { pair.get(i, 0) }).collect();
        assert!((l.supervised - supervised_loss(&b.y_f, &yf_hat).unwrap()).abs() < 1e-12);
        assert_eq!(discriminator_loss(&m, &b).unwrap().0, l.discriminator);
        assert!((generator_loss(&m, &b, w).unwrap().0 - l.generator).abs() < 1e-12);
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let mut m = GanModels::new(2, 8, OutcomeKind::Continuous, &small_cfg(), 5).unwrap();
        let b = batch(8, 2, &m, 5);
        let mut opts = GanOptimizers::new(&m, &small_cfg());
        let before = m.clone();
        discriminator_step(&mut m, &mut opts.discriminator, &b).unwrap();
        assert_eq!(m.generator, before.generator);
        assert_eq!(m.q, before.q);
        assert_ne!(m.discriminator, before.discriminator);
        let mid = m.clone();
        generator_step(&mut m, &mut opts.generator, &b, LossWeights { lambda: 1.0, gamma: 1.0 }).unwrap();
        assert_eq!(m.discriminator, mid.discriminator);
        assert_ne!(m.generator, mid.generator);
        assert_ne!(m.q, mid.q);
    }

    #[test]
    fn completion_keeps_factual_and_picks_missing_slot() {
        let ds = gen_cevae(40, 3).unwrap();
        let vae_model = VaeModel::build(&ds.covariate_kinds, &VaeConfig::default(), 3).unwrap();
        let m = GanModels::new(ds.d(), 8, ds.outcome_kind, &GanConfig::default(), 3).unwrap();
        let q = complete_dataset(&m.generator, &vae_model, &ds, 7).unwrap();
        assert_eq!(q.len(), ds.n());
        assert_eq!(q.y_f, ds.y_f);
        let pair = generated_pairs(&m.generator, &vae_model, &ds, 7).unwrap();
        for i in 0..ds.n() {
            let slot = if ds.t[i] == 1.0 { 0 } else { 1 };
            assert_eq!(q.y_cf[i], pair.get(i, slot));
        }
        assert_eq!(q, complete_dataset(&m.generator, &vae_model, &ds, 7).unwrap());
    }

    #[test]
    fn quadruple_csv_layout() {
        let ds = gen_cevae(3, 1).unwrap();
        let q = Quadruples::from_true_counterfactuals(&ds).unwrap();
        let mut buf = Vec::new();
        q.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,x3,x4,x5,t,y_f,y_cf\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
