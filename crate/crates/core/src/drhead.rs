//! Doubly robust multitask effect estimator.
//!
//! A shared trunk feeds two outcome heads, a propensity head and a regressor
//! head `μ(x, t)`. Training minimizes the predicted-outcome loss on both
//! potential outcomes plus the squared error of the doubly robust outcomes
//!
//! ```text
//! A      = (t - π) μ
//! ŷ_fDR  = t [(t ŷ1 - A) / π] + (1 - t) [((1 - t) ŷ0 - A) / (1 - π)]
//! ŷ_cfDR = (1 - t) [((1 - t) ŷ1 - A) / π] + t [(t ŷ0 - A) / (1 - π)]
//! ```

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{collect_grads, Activation, AdamConfig, AdamState, BoundMlp, Graph, Mlp, Module, NodeId, Tensor};
use crate::cfgan::Quadruples;
use crate::datagen::{validate_treatment, Dataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Weight of the propensity cross-entropy.
    pub alpha: f64,
    /// Weight of the doubly robust loss.
    pub beta: f64,
    /// Propensities are clamped to `[eps_clip, 1 - eps_clip]`.
    pub eps_clip: f64,
    pub lr: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            alpha: 1.0,
            beta: 1.0,
            eps_clip: 0.01,
            lr: 1e-4,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 0.5) {
            return Err(Error::invalid(format!("eps_clip {} outside (0, 0.5)", self.eps_clip)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} is not a non-negative number", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrConfig {
    pub trunk_hidden: Vec<usize>,
    pub outcome_hidden: Vec<usize>,
    pub propensity_hidden: Vec<usize>,
    pub regressor_hidden: Vec<usize>,
    pub hyper: Hyper,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DrConfig {
    fn default() -> Self {
        DrConfig {
            trunk_hidden: vec![200, 200, 100],
            outcome_hidden: vec![100, 100],
            propensity_hidden: vec![200, 200],
            regressor_hidden: vec![200, 200, 200, 100, 100, 100],
            hyper: Hyper::default(),
            epochs: 200,
            batch_size: 64,
        }
    }
}

fn head_dims(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(hidden);
    d.push(1);
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrModel {
    trunk: Mlp,
    outcome: [Mlp; 2],
    propensity: Mlp,
    /// Input is the trunk output with `t` appended.
    regressor: Mlp,
    eps_clip: f64,
}

impl DrModel {
    pub fn new<R: Rng + ?Sized>(covariates: usize, kind: OutcomeKind, cfg: &DrConfig, rng: &mut R) -> Result<Self> {
        cfg.hyper.validate()?;
        if cfg.trunk_hidden.is_empty() {
            return Err(Error::invalid("trunk needs at least one layer"));
        }
        let mut trunk_dims = vec![covariates];
        trunk_dims.extend(&cfg.trunk_hidden);
        let trunk = Mlp::relu_stack(&trunk_dims, Activation::Relu, rng)?;
        let h = trunk.output_dim();
        let last = match kind {
            OutcomeKind::Continuous => Activation::Identity,
            OutcomeKind::Binary => Activation::Sigmoid,
        };
        let outcome = [
            Mlp::relu_stack(&head_dims(h, &cfg.outcome_hidden), last, rng)?,
            Mlp::relu_stack(&head_dims(h, &cfg.outcome_hidden), last, rng)?,
        ];
        let propensity = Mlp::relu_stack(&head_dims(h, &cfg.propensity_hidden), Activation::Sigmoid, rng)?;
        let regressor = Mlp::relu_stack(&head_dims(h + 1, &cfg.regressor_hidden), Activation::Identity, rng)?;
        Ok(DrModel {
            trunk,
            outcome,
            propensity,
            regressor,
            eps_clip: cfg.hyper.eps_clip,
        })
    }

    pub fn build(covariates: usize, kind: OutcomeKind, cfg: &DrConfig, seed: u64) -> Result<Self> {
        Self::new(covariates, kind, cfg, &mut rng::stream(seed, tags::DR_INIT))
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn eps_clip(&self) -> f64 {
        self.eps_clip
    }

    fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            trunk: self.trunk.bind(g),
            y0: self.outcome[0].bind(g),
            y1: self.outcome[1].bind(g),
            propensity: self.propensity.bind(g),
            regressor: self.regressor.bind(g),
        }
    }

    fn check(&self, x: &Tensor, t: &[f64]) -> Result<()> {
        x.require_rank2("dr predict")?;
        if x.cols() != self.input_dim() || x.rows() != t.len() {
            return Err(Error::shape(
                "dr predict",
                format!("covariates {:?} with {} treatments, model expects width {}", x.shape(), t.len(), self.input_dim()),
            ));
        }
        validate_treatment(t)
    }
}

impl Module for DrModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut v = self.trunk.parameters();
        v.extend(self.outcome[0].parameters());
        v.extend(self.outcome[1].parameters());
        v.extend(self.propensity.parameters());
        v.extend(self.regressor.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let [o0, o1] = &mut self.outcome;
        let mut v = self.trunk.parameters_mut();
        v.extend(o0.parameters_mut());
        v.extend(o1.parameters_mut());
        v.extend(self.propensity.parameters_mut());
        v.extend(self.regressor.parameters_mut());
        v
    }
}

struct Bound {
    trunk: BoundMlp,
    y0: BoundMlp,
    y1: BoundMlp,
    propensity: BoundMlp,
    regressor: BoundMlp,
}

impl Bound {
    fn nodes(&self) -> Vec<NodeId> {
        [&self.trunk, &self.y0, &self.y1, &self.propensity, &self.regressor]
            .iter()
            .flat_map(|b| b.nodes().to_vec())
            .collect()
    }
}

struct Heads {
    y0: NodeId,
    y1: NodeId,
    pi: NodeId,
    mu: NodeId,
}

fn forward_heads(model: &DrModel, b: &Bound, g: &mut Graph, x: NodeId, t: NodeId) -> Result<Heads> {
    let h = b.trunk.forward(g, x)?;
    let y0 = b.y0.forward(g, h)?;
    let y1 = b.y1.forward(g, h)?;
    let p = b.propensity.forward(g, h)?;
    let pi = g.clamp(p, model.eps_clip, 1.0 - model.eps_clip)?;
    let ht = g.concat_cols(&[h, t])?;
    let mu = b.regressor.forward(g, ht)?;
    Ok(Heads { y0, y1, pi, mu })
}

/// Raw head outputs; `mu` is evaluated at the supplied treatments.
#[derive(Clone, Debug, PartialEq)]
pub struct DrPredictions {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
}

impl DrPredictions {
    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    pub fn effects(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).collect()
    }
}

pub fn predict(model: &DrModel, x: &Tensor, t: &[f64]) -> Result<DrPredictions> {
    model.check(x, t)?;
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let xin = g.leaf(x.clone());
    let tin = g.leaf(Tensor::column(t)?);
    let h = forward_heads(model, &b, &mut g, xin, tin)?;
    let col = |id: NodeId| g.value(id).data().to_vec();
    Ok(DrPredictions {
        y0: col(h.y0),
        y1: col(h.y1),
        pi: col(h.pi),
        mu: col(h.mu),
    })
}

/// `τ̂(x) = ŷ1(x) - ŷ0(x)`; only the trunk and outcome heads are evaluated.
pub fn estimate_ite(model: &DrModel, x: &Tensor) -> Result<Vec<f64>> {
    let (y0, y1) = potential_outcomes(model, x)?;
    Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
}

/// `(ŷ0, ŷ1)` for every row.
pub fn potential_outcomes(model: &DrModel, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check(x, &vec![0.0; x.rows()])?;
    let h = model.trunk.predict(x)?;
    Ok((
        model.outcome[0].predict(&h)?.into_data(),
        model.outcome[1].predict(&h)?.into_data(),
    ))
}

/// `ŷ_f = t ŷ1 + (1 - t) ŷ0` and `ŷ_cf = (1 - t) ŷ1 + t ŷ0`.
pub fn factual_counterfactual(y0: &[f64], y1: &[f64], t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f = t.iter().zip(y0.iter().zip(y1)).map(|(&t, (&a, &b))| t * b + (1.0 - t) * a).collect();
    let cf = t.iter().zip(y0.iter().zip(y1)).map(|(&t, (&a, &b))| (1.0 - t) * b + t * a).collect();
    (f, cf)
}

fn bce(p: f64, t: f64) -> f64 {
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn check_lengths(op: &'static str, lens: &[usize]) -> Result<usize> {
    let n = lens[0];
    if n == 0 || lens.iter().any(|&l| l != n) {
        return Err(Error::shape(op, format!("lengths {lens:?}")));
    }
    Ok(n)
}

/// Batch mean of `(ŷ_f - y_f)² + (ŷ_cf - y_cf)² + α BCE(π̂, t)`.
pub fn predicted_loss(p: &DrPredictions, y_f: &[f64], y_cf: &[f64], t: &[f64], alpha: f64) -> Result<f64> {
    let n = check_lengths("predicted_loss", &[p.len(), y_f.len(), y_cf.len(), t.len()])?;
    let (f, cf) = factual_counterfactual(&p.y0, &p.y1, t);
    let total: f64 = (0..n)
        .map(|i| (f[i] - y_f[i]).powi(2) + (cf[i] - y_cf[i]).powi(2) + alpha * bce(p.pi[i], t[i]))
        .sum();
    Ok(total / n as f64)
}

/// Batch mean of `(ŷ_f - y_f)² + α BCE(π̂, t)`; needs no counterfactual label.
pub fn factual_loss(p: &DrPredictions, y_f: &[f64], t: &[f64], alpha: f64) -> Result<f64> {
    let n = check_lengths("factual_loss", &[p.len(), y_f.len(), t.len()])?;
    let (f, _) = factual_counterfactual(&p.y0, &p.y1, t);
    Ok((0..n).map(|i| (f[i] - y_f[i]).powi(2) + alpha * bce(p.pi[i], t[i])).sum::<f64>() / n as f64)
}

/// `(ŷ_fDR, ŷ_cfDR)` per row.
pub fn dr_outcomes(p: &DrPredictions, t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths("dr_outcomes", &[p.len(), t.len()])?;
    let mut f = Vec::with_capacity(t.len());
    let mut cf = Vec::with_capacity(t.len());
    for (i, &t) in t.iter().enumerate() {
        let (pi, y0, y1) = (p.pi[i], p.y0[i], p.y1[i]);
        let a = (t - pi) * p.mu[i];
        f.push(t * ((t * y1 - a) / pi) + (1.0 - t) * (((1.0 - t) * y0 - a) / (1.0 - pi)));
        cf.push((1.0 - t) * (((1.0 - t) * y1 - a) / pi) + t * ((t * y0 - a) / (1.0 - pi)));
    }
    Ok((f, cf))
}

/// Batch mean of `(ŷ_fDR - y_f)² + (ŷ_cfDR - y_cf)²`.
pub fn dr_loss(f_dr: &[f64], cf_dr: &[f64], y_f: &[f64], y_cf: &[f64]) -> Result<f64> {
    let n = check_lengths("dr_loss", &[f_dr.len(), cf_dr.len(), y_f.len(), y_cf.len()])?;
    Ok((0..n).map(|i| (f_dr[i] - y_f[i]).powi(2) + (cf_dr[i] - y_cf[i]).powi(2)).sum::<f64>() / n as f64)
}

/// `L^ITE = L^p + β L^DR`.
pub fn ite_loss(predicted: f64, dr: f64, beta: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    Ok(predicted + beta * dr)
}

/// Sample doubly robust ATE estimate from outcomes, treatments and nuisance
/// values. Propensities must lie strictly inside `(0, 1)`.
pub fn dr_ate_estimate(y: &[f64], t: &[f64], pi: &[f64], mu: &[f64]) -> Result<f64> {
    let n = check_lengths("dr_ate_estimate", &[y.len(), t.len(), pi.len(), mu.len()])?;
    validate_treatment(t)?;
    if let Some(p) = pi.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::invalid(format!("propensity {p} outside (0, 1)")));
    }
    let total: f64 = (0..n)
        .map(|i| {
            let a = (t[i] - pi[i]) * mu[i];
            (y[i] * t[i] - a) / pi[i] - (y[i] * (1.0 - t[i]) - a) / (1.0 - pi[i])
        })
        .sum();
    Ok(total / n as f64)
}

/// Which loss [`loss_gradients`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrLoss {
    Predicted,
    DoublyRobust,
    Ite,
}

struct LossNodes {
    predicted: NodeId,
    dr: NodeId,
    ite: NodeId,
}

fn loss_nodes(model: &DrModel, b: &Bound, g: &mut Graph, q: &Quadruples, hyper: &Hyper) -> Result<LossNodes> {
    model.check(&q.x, &q.t)?;
    let n = check_lengths("dr loss", &[q.len(), q.y_f.len(), q.y_cf.len()])? as f64;
    let tc_v: Vec<f64> = q.t.iter().map(|t| 1.0 - t).collect();
    let x = g.leaf(q.x.clone());
    let t = g.leaf(Tensor::column(&q.t)?);
    let tc = g.leaf(Tensor::column(&tc_v)?);
    let yf = g.leaf(Tensor::column(&q.y_f)?);
    let ycf = g.leaf(Tensor::column(&q.y_cf)?);
    let h = forward_heads(model, b, g, x, t)?;

    let t_y1 = g.mul(t, h.y1)?;
    let tc_y0 = g.mul(tc, h.y0)?;
    let tc_y1 = g.mul(tc, h.y1)?;
    let t_y0 = g.mul(t, h.y0)?;
    let f = g.add(t_y1, tc_y0)?;
    let cf = g.add(tc_y1, t_y0)?;

    let ef = g.sub(f, yf)?;
    let ef = g.square(ef)?;
    let ecf = g.sub(cf, ycf)?;
    let ecf = g.square(ecf)?;
    let log_pi = g.log(h.pi)?;
    let one_m = g.neg(h.pi)?;
    let one_m = g.offset(one_m, 1.0)?;
    let log_1m = g.log(one_m)?;
    let a = g.mul(t, log_pi)?;
    let c = g.mul(tc, log_1m)?;
    let ll = g.add(a, c)?;
    let bce = g.scale(ll, -hyper.alpha)?;
    let lp = g.add(ef, ecf)?;
    let lp = g.add(lp, bce)?;
    let lp_sum = g.sum(lp)?;
    let predicted = g.scale(lp_sum, 1.0 / n)?;

    let t_pi = g.sub(t, h.pi)?;
    let a = g.mul(t_pi, h.mu)?;
    let num1 = g.sub(t_y1, a)?;
    let num0 = g.sub(tc_y0, a)?;
    let r1 = g.div(num1, h.pi)?;
    let r0 = g.div(num0, one_m)?;
    let p1 = g.mul(t, r1)?;
    let p0 = g.mul(tc, r0)?;
    let f_dr = g.add(p1, p0)?;
    let num1 = g.sub(tc_y1, a)?;
    let num0 = g.sub(t_y0, a)?;
    let r1 = g.div(num1, h.pi)?;
    let r0 = g.div(num0, one_m)?;
    let p1 = g.mul(tc, r1)?;
    let p0 = g.mul(t, r0)?;
    let cf_dr = g.add(p1, p0)?;
    let e1 = g.sub(f_dr, yf)?;
    let e1 = g.square(e1)?;
    let e2 = g.sub(cf_dr, ycf)?;
    let e2 = g.square(e2)?;
    let ldr = g.add(e1, e2)?;
    let ldr_sum = g.sum(ldr)?;
    let dr = g.scale(ldr_sum, 1.0 / n)?;

    let bdr = g.scale(dr, hyper.beta)?;
    let ite = g.add(predicted, bdr)?;
    Ok(LossNodes { predicted, dr, ite })
}

/// Value of the chosen loss and its gradient for every tensor in
/// [`Module::parameters`] order.
pub fn loss_gradients(model: &DrModel, q: &Quadruples, hyper: &Hyper, which: DrLoss) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let l = loss_nodes(model, &b, &mut g, q, hyper)?;
    let node = match which {
        DrLoss::Predicted => l.predicted,
        DrLoss::DoublyRobust => l.dr,
        DrLoss::Ite => l.ite,
    };
    let grads = g.backward(node)?;
    Ok((g.value(node).item()?, collect_grads(&grads, &b.nodes())))
}

/// `(L^p, L^DR, L^ITE)` on a batch.
pub fn batch_losses(model: &DrModel, q: &Quadruples, hyper: &Hyper) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let l = loss_nodes(model, &b, &mut g, q, hyper)?;
    Ok((g.value(l.predicted).item()?, g.value(l.dr).item()?, g.value(l.ite).item()?))
}

/// One Adam update of all five networks on `L^ITE`.
pub fn train_step(model: &mut DrModel, opt: &mut AdamState, q: &Quadruples, hyper: &Hyper) -> Result<f64> {
    let (loss, grads) = loss_gradients(model, q, hyper, DrLoss::Ite)?;
    opt.step(model.parameters_mut(), &grads)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrEpoch {
    pub train_ite: f64,
    /// Factual validation loss, when a validation split was given.
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedDr {
    pub model: DrModel,
    pub history: Vec<DrEpoch>,
    /// Epoch whose weights were kept.
    pub selected_epoch: usize,
}

/// Trains on completed quadruples. With a non-empty validation set the
/// weights after the epoch with the lowest factual validation loss are
/// kept; otherwise the final weights.
pub fn train_dr(q: &Quadruples, validation: Option<&Dataset>, kind: OutcomeKind, cfg: &DrConfig, seed: u64) -> Result<TrainedDr> {
    if q.is_empty() {
        return Err(Error::invalid("no quadruples to train on"));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    let mut model = DrModel::build(q.x.cols(), kind, cfg, seed)?;
    let mut opt = AdamState::for_module(&model, AdamConfig::with_lr(cfg.hyper.lr));
    let mut batch_rng = rng::stream(seed, tags::DR_BATCHES);
    let validation = validation.filter(|v| v.n() > 0);
    let mut best: Option<(f64, usize, DrModel)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = rng::shuffled_batches(q.len(), cfg.batch_size, &mut batch_rng);
        let mut total = 0.0;
        for idx in &batches {
            total += train_step(&mut model, &mut opt, &q.subset(idx), &cfg.hyper).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("doubly robust training, epoch {epoch}: {context}"),
                },
                other => other,
            })?;
        }
        let val = match validation {
            Some(v) => {
                let p = predict(&model, &v.x, &v.t)?;
                let l = factual_loss(&p, &v.y_f, &v.t, cfg.hyper.alpha)?;
                if best.as_ref().is_none_or(|(b, _, _)| l < *b) {
                    best = Some((l, epoch, model.clone()));
                }
                Some(l)
            }
            None => None,
        };
        history.push(DrEpoch {
            train_ite: total / batches.len() as f64,
            validation: val,
        });
    }
    let (model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs - 1),
    };
    Ok(TrainedDr {
        model,
        history,
        selected_epoch,
    })
}

/// Columns: `y0_hat`, `y1_hat`, `propensity`, `ite`.
pub fn write_predictions_to<W: Write>(model: &DrModel, x: &Tensor, w: W) -> Result<()> {
    let path = Path::new("<writer>");
    let n = x.rows();
    // The propensity head does not depend on t.
    let p = predict(model, x, &vec![0.0; n])?;
    let mut wr = csv::Writer::from_writer(w);
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    wr.write_record(["y0_hat", "y1_hat", "propensity", "ite"]).map_err(csv_err)?;
    for i in 0..n {
        let rec = [p.y0[i], p.y1[i], p.pi[i], p.y1[i] - p.y0[i]].map(|v| v.to_string());
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions(model: &DrModel, x: &Tensor, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions_to(model, x, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Csv { source, .. } => Error::Csv {
            path: path.to_path_buf(),
            source,
        },
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}
