use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Anything owning trainable tensors. The order of `parameters` and
/// `parameters_mut` must match the order of the node ids its binding reports.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    fn zero_parameters(&mut self) {
        for p in self.parameters_mut() {
            p.data_mut().fill(0.0);
        }
    }
}

/// Fully connected layer computing `x · W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Linear {
            weight: Tensor::from_raw(vec![fan_in, fan_out], weight),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
    activations: Vec<Activation>,
}

impl Mlp {
    /// `dims` lists layer widths input-first; `activations` has one entry per
    /// weight layer. Initialization is a pure function of `seed`.
    pub fn build(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(dims, activations, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(format!(
                "an MLP needs at least two widths, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::invalid(format!("zero layer width in {dims:?}")));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::invalid(format!(
                "{} activations for {} layers",
                activations.len(),
                dims.len() - 1
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            activations: activations.to_vec(),
        })
    }

    /// ReLU on every layer except the last, which uses `last`.
    pub fn relu_stack<R: Rng + ?Sized>(dims: &[usize], last: Activation, rng: &mut R) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let mut acts = vec![Activation::Relu; n];
        if let Some(a) = acts.last_mut() {
            *a = last;
        }
        Self::with_rng(dims, &acts, rng)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Linear::out_dim));
        d
    }

    /// Registers the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .flat_map(|l| [g.leaf(l.weight.clone()), g.leaf(l.bias.clone())])
            .collect();
        BoundMlp {
            params,
            activations: self.activations.clone(),
            input_dim: self.input_dim(),
        }
    }

    /// Forward pass recorded on `g`, for callers that do not need gradients
    /// with respect to the weights.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.bind(g).forward(g, x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xin = g.leaf(x.clone());
        let out = self.forward(&mut g, xin)?;
        Ok(g.value(out).clone())
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}

/// An [`Mlp`] whose parameters live on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    params: Vec<NodeId>,
    activations: Vec<Activation>,
    input_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let xv = g.value(x);
        xv.require_rank2("mlp forward")?;
        if xv.cols() != self.input_dim {
            return Err(Error::shape(
                "mlp forward",
                format!("input width {} but first layer expects {}", xv.cols(), self.input_dim),
            ));
        }
        let mut h = x;
        for (pair, act) in self.params.chunks(2).zip(&self.activations) {
            let z = g.matmul(h, pair[0])?;
            let z = g.add_row(z, pair[1])?;
            h = act.apply(g, z)?;
        }
        Ok(h)
    }

    /// Parameter node ids in [`Module::parameters`] order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.params
    }
}
