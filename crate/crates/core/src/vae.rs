//! Latent factorization of covariates.
//!
//! A shared ReLU trunk feeds four Gaussian posterior heads, one per latent
//! block (covariates, treatment, factual outcome, counterfactual outcome).
//! Each head emits a mean and a log-variance. A single decoder reconstructs
//! the covariates from the concatenated sample. The loss is the negative
//! evidence lower bound: reconstruction negative log-likelihood plus one KL
//! term per block against a standard-normal prior.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    collect_grads, Activation, AdamConfig, AdamState, BoundMlp, Graph, Linear, Mlp, Module, NodeId,
    Tensor,
};
use crate::datagen::CovariateKind;
use crate::error::{Error, Result};
use crate::rng;

/// Number of latent blocks.
pub const BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentDims {
    pub x: usize,
    pub t: usize,
    pub yf: usize,
    pub ycf: usize,
}

impl Default for LatentDims {
    fn default() -> Self {
        LatentDims {
            x: 5,
            t: 1,
            yf: 1,
            ycf: 1,
        }
    }
}

impl LatentDims {
    pub fn as_array(&self) -> [usize; BLOCKS] {
        [self.x, self.t, self.yf, self.ycf]
    }

    pub fn total(&self) -> usize {
        self.as_array().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Hidden widths of the shared encoder trunk.
    pub encoder_hidden: Vec<usize>,
    /// Hidden widths of the decoder; its output layer has width `d`.
    pub decoder_hidden: Vec<usize>,
    pub latent: LatentDims,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            encoder_hidden: vec![15, 15, 15],
            decoder_hidden: vec![15, 15, 15, 15],
            latent: LatentDims::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    trunk: Mlp,
    heads: Vec<Linear>,
    decoder: Mlp,
    latent: LatentDims,
    covariate_kinds: Vec<CovariateKind>,
}

/// Per-block posterior means and standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub means: [Tensor; BLOCKS],
    pub sigmas: [Tensor; BLOCKS],
}

impl PosteriorParams {
    /// Posterior means concatenated in block order, `n × total`.
    pub fn mean_latent(&self) -> Result<Tensor> {
        concat_values(&self.means)
    }
}

/// The five components of the VAE loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl: [f64; BLOCKS],
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.kl.iter().sum::<f64>()
    }
}

/// Standard-normal noise for the reparameterization, one tensor per block.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise(pub [Tensor; BLOCKS]);

impl LatentNoise {
    pub fn sample<R: Rng + ?Sized>(rows: usize, dims: LatentDims, rng: &mut R) -> Self {
        LatentNoise(dims.as_array().map(|k| rng::standard_normal(rows, k, rng)))
    }

    pub fn zeros(rows: usize, dims: LatentDims) -> Self {
        LatentNoise(dims.as_array().map(|k| Tensor::zeros(&[rows, k])))
    }
}

pub(crate) struct VaeBinding {
    trunk: BoundMlp,
    heads: Vec<(NodeId, NodeId)>,
    decoder: BoundMlp,
}

impl VaeBinding {
    pub(crate) fn nodes(&self) -> Vec<NodeId> {
        let mut v = self.trunk.nodes().to_vec();
        for &(w, b) in &self.heads {
            v.extend([w, b]);
        }
        v.extend_from_slice(self.decoder.nodes());
        v
    }
}

/// Graph nodes of one VAE forward pass.
pub(crate) struct VaeForward {
    pub loss: NodeId,
    pub reconstruction: NodeId,
    pub kl: [NodeId; BLOCKS],
    pub z_c: NodeId,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(
        covariate_kinds: &[CovariateKind],
        config: &VaeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = covariate_kinds.len();
        if d == 0 {
            return Err(Error::invalid("VAE needs at least one covariate"));
        }
        if config.latent.as_array().contains(&0) {
            return Err(Error::invalid("latent block widths must be positive"));
        }
        let mut trunk_dims = vec![d];
        trunk_dims.extend(&config.encoder_hidden);
        let trunk = Mlp::relu_stack(&trunk_dims, Activation::Relu, rng)?;
        let h = trunk.output_dim();
        let heads = config
            .latent
            .as_array()
            .iter()
            .map(|&k| Linear::glorot(h, 2 * k, rng))
            .collect();
        let mut dec_dims = vec![config.latent.total()];
        dec_dims.extend(&config.decoder_hidden);
        dec_dims.push(d);
        let decoder = Mlp::relu_stack(&dec_dims, Activation::Identity, rng)?;
        Ok(VaeModel {
            trunk,
            heads,
            decoder,
            latent: config.latent,
            covariate_kinds: covariate_kinds.to_vec(),
        })
    }

    pub fn build(covariate_kinds: &[CovariateKind], config: &VaeConfig, seed: u64) -> Result<Self> {
        Self::new(covariate_kinds, config, &mut rng::stream(seed, rng::tags::VAE_INIT))
    }

    pub fn latent_dims(&self) -> LatentDims {
        self.latent
    }

    pub fn input_dim(&self) -> usize {
        self.covariate_kinds.len()
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> VaeBinding {
        VaeBinding {
            trunk: self.trunk.bind(g),
            heads: self
                .heads
                .iter()
                .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
                .collect(),
            decoder: self.decoder.bind(g),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.require_rank2("vae encode")?;
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "vae encode",
                format!("input width {} but model expects {}", x.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    /// `(mean, log-variance)` node pairs per block.
    fn encode_nodes(&self, b: &VaeBinding, g: &mut Graph, x: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let h = b.trunk.forward(g, x)?;
        let mut out = Vec::with_capacity(BLOCKS);
        for (&(w, bias), k) in b.heads.iter().zip(self.latent.as_array()) {
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, bias)?;
            let mu = g.slice_cols(z, 0, k)?;
            let logvar = g.slice_cols(z, k, 2 * k)?;
            out.push((mu, logvar));
        }
        Ok(out)
    }

    pub fn encode(&self, x: &Tensor) -> Result<PosteriorParams> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let xin = g.leaf(x.clone());
        let nodes = self.encode_nodes(&b, &mut g, xin)?;
        let means: Vec<Tensor> = nodes.iter().map(|(m, _)| g.value(*m).clone()).collect();
        let sigmas: Vec<Tensor> = nodes
            .iter()
            .map(|(_, lv)| g.value(*lv).map(|v| (0.5 * v).exp()))
            .collect();
        for s in &sigmas {
            s.ensure_finite("posterior standard deviation")?;
        }
        Ok(PosteriorParams {
            means: means.try_into().expect("four blocks"),
            sigmas: sigmas.try_into().expect("four blocks"),
        })
    }

    pub fn decode(&self, z_c: &Tensor) -> Result<Tensor> {
        z_c.require_rank2("vae decode")?;
        if z_c.cols() != self.latent.total() {
            return Err(Error::shape(
                "vae decode",
                format!("latent width {} but model expects {}", z_c.cols(), self.latent.total()),
            ));
        }
        self.decoder.predict(z_c)
    }

    pub(crate) fn forward_loss(
        &self,
        b: &VaeBinding,
        g: &mut Graph,
        x: &Tensor,
        noise: &LatentNoise,
    ) -> Result<VaeForward> {
        self.check_input(x)?;
        let n = x.rows();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let xin = g.leaf(x.clone());
        let post = self.encode_nodes(b, g, xin)?;
        let mut zs = Vec::with_capacity(BLOCKS);
        let mut kls = Vec::with_capacity(BLOCKS);
        for (&(mu, logvar), eps) in post.iter().zip(&noise.0) {
            if g.value(mu).shape() != eps.shape() {
                return Err(Error::shape(
                    "reparameterize",
                    format!("{:?} vs noise {:?}", g.value(mu).shape(), eps.shape()),
                ));
            }
            let half = g.scale(logvar, 0.5)?;
            let sigma = g.exp(half)?;
            let eps = g.leaf(eps.clone());
            zs.push(reparameterize_node(g, mu, sigma, eps)?);
            kls.push(kl_node(g, mu, logvar)?);
        }
        let z_c = g.concat_cols(&zs)?;
        let x_hat = b.decoder.forward(g, z_c)?;
        let reconstruction = reconstruction_nll(g, xin, x_hat, &self.covariate_kinds)?;
        let mut loss = reconstruction;
        for &k in &kls {
            loss = g.add(loss, k)?;
        }
        Ok(VaeForward {
            loss,
            reconstruction,
            kl: kls.try_into().expect("four blocks"),
            z_c,
        })
    }
}

impl Module for VaeModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut v = self.trunk.parameters();
        for l in &self.heads {
            v.extend(l.parameters());
        }
        v.extend(self.decoder.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.trunk.parameters_mut();
        for l in &mut self.heads {
            v.extend(l.parameters_mut());
        }
        v.extend(self.decoder.parameters_mut());
        v
    }
}

/// `z = mu + eps * sigma`.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?}, {:?}, {:?}", mu.shape(), sigma.shape(), eps.shape()),
        ));
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + e * s)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

/// Differentiable form of [`reparameterize`]; `eps` is a constant leaf.
pub fn reparameterize_node(g: &mut Graph, mu: NodeId, sigma: NodeId, eps: NodeId) -> Result<NodeId> {
    let scaled = g.mul(eps, sigma)?;
    g.add(mu, scaled)
}

/// `KL(N(mu, sigma²) || N(0, 1))` summed over latent dimensions and averaged
/// over rows.
pub fn kl_standard_normal(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape(
            "kl_standard_normal",
            format!("{:?} vs {:?}", mu.shape(), sigma.shape()),
        ));
    }
    if let Some(s) = sigma.data().iter().find(|&&s| s <= 0.0) {
        return Err(Error::invalid(format!("standard deviation must be positive, got {s}")));
    }
    let total: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| {
            let var = s * s;
            0.5 * (var + m * m - 1.0 - var.ln())
        })
        .sum();
    Ok(total / mu.rows().max(1) as f64)
}

/// KL term from a log-variance parameterization, as a graph node.
fn kl_node(g: &mut Graph, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let n = g.value(mu).rows().max(1) as f64;
    let var = g.exp(logvar)?;
    let mu2 = g.square(mu)?;
    let s = g.add(var, mu2)?;
    let s = g.sub(s, logvar)?;
    let s = g.offset(s, -1.0)?;
    let total = g.sum(s)?;
    g.scale(total, 0.5 / n)
}

/// Negative log-likelihood of `x` under the decoder output, summed over
/// covariates and averaged over rows. Continuous columns use a unit-variance
/// Gaussian with mean `x_hat`; binary columns a Bernoulli with logit `x_hat`.
fn reconstruction_nll(g: &mut Graph, x: NodeId, x_hat: NodeId, kinds: &[CovariateKind]) -> Result<NodeId> {
    let (n, d) = (g.value(x).rows(), g.value(x).cols());
    let mask = |want: CovariateKind| {
        let row: Vec<f64> = kinds
            .iter()
            .map(|&k| if k == want { 1.0 } else { 0.0 })
            .collect();
        Tensor::matrix(n, d, row.repeat(n))
    };
    let n_cont = kinds.iter().filter(|&&k| k == CovariateKind::Continuous).count();
    let n_bin = d - n_cont;

    let mut parts = Vec::new();
    if n_cont > 0 {
        let diff = g.sub(x_hat, x)?;
        let sq = g.square(diff)?;
        let sq = if n_bin > 0 {
            let m = g.leaf(mask(CovariateKind::Continuous)?);
            g.mul(sq, m)?
        } else {
            sq
        };
        let s = g.sum(sq)?;
        let s = g.scale(s, 0.5 / n as f64)?;
        parts.push(g.offset(s, 0.5 * n_cont as f64 * (2.0 * PI).ln())?);
    }
    if n_bin > 0 {
        // softplus(l) - x l is the Bernoulli negative log-likelihood at logit l.
        let sp = g.softplus(x_hat)?;
        let xl = g.mul(x, x_hat)?;
        let nll = g.sub(sp, xl)?;
        let nll = if n_cont > 0 {
            let m = g.leaf(mask(CovariateKind::Binary)?);
            g.mul(nll, m)?
        } else {
            nll
        };
        let s = g.sum(nll)?;
        parts.push(g.scale(s, 1.0 / n as f64)?);
    }
    match parts.as_slice() {
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!("at least one covariate"),
    }
}

/// Loss value and its five-way breakdown for one batch.
pub fn elbo_loss(model: &VaeModel, x: &Tensor, noise: &LatentNoise) -> Result<(f64, ElboTerms)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let f = model.forward_loss(&b, &mut g, x, noise)?;
    Ok((g.value(f.loss).item()?, terms_of(&g, &f)?))
}

/// Loss value and its gradient for every tensor in [`Module::parameters`]
/// order.
pub fn loss_gradients(model: &VaeModel, x: &Tensor, noise: &LatentNoise) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let f = model.forward_loss(&b, &mut g, x, noise)?;
    let grads = g.backward(f.loss)?;
    Ok((g.value(f.loss).item()?, collect_grads(&grads, &b.nodes())))
}

fn terms_of(g: &Graph, f: &VaeForward) -> Result<ElboTerms> {
    let mut kl = [0.0; BLOCKS];
    for (slot, &node) in kl.iter_mut().zip(&f.kl) {
        *slot = g.value(node).item()?;
    }
    Ok(ElboTerms {
        reconstruction: g.value(f.reconstruction).item()?,
        kl,
    })
}

/// Result of one optimizer step on the VAE loss.
#[derive(Clone, Debug)]
pub struct VaeStep {
    pub loss: f64,
    pub terms: ElboTerms,
    /// The sampled concatenated latent used in this step, detached.
    pub z_c: Tensor,
}

pub fn new_optimizer(model: &VaeModel, lr: f64) -> AdamState {
    AdamState::for_module(model, AdamConfig::with_lr(lr))
}

/// One Adam update of trunk, heads and decoder on the VAE loss only.
pub fn vae_train_step(
    model: &mut VaeModel,
    opt: &mut AdamState,
    x: &Tensor,
    noise: &LatentNoise,
) -> Result<VaeStep> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let f = model.forward_loss(&b, &mut g, x, noise)?;
    let grads = g.backward(f.loss)?;
    let grads = collect_grads(&grads, &b.nodes());
    opt.step(model.parameters_mut(), &grads)?;
    Ok(VaeStep {
        loss: g.value(f.loss).item()?,
        terms: terms_of(&g, &f)?,
        z_c: g.value(f.z_c).clone(),
    })
}

/// Trains the VAE alone for `epochs` passes over `x`; returns the mean batch
/// loss of each epoch.
pub fn train_vae(
    model: &mut VaeModel,
    x: &Tensor,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut opt = new_optimizer(model, lr);
    let mut batch_rng = rng::stream(seed, rng::tags::BATCHES);
    let mut noise_rng = rng::stream(seed, rng::tags::VAE_NOISE);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        let batches = rng::shuffled_batches(x.rows(), batch_size, &mut batch_rng);
        for idx in &batches {
            let xb = x.select_rows(idx);
            let noise = LatentNoise::sample(idx.len(), model.latent, &mut noise_rng);
            total += vae_train_step(model, &mut opt, &xb, &noise)?.loss;
        }
        history.push(total / batches.len().max(1) as f64);
    }
    Ok(history)
}

fn concat_values(parts: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = parts.iter().map(|p| g.leaf(p.clone())).collect();
    let c = g.concat_cols(&ids)?;
    Ok(g.value(c).clone())
}
