use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::autodiff::{sigmoid, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise nonlinearity applied to every projected set element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    pub fn node(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::contract(format!("unknown activation `{other}`"))),
        }
    }
}

/// A single-layer set aggregation network.
///
/// Neuron `m` has weight row `v_m` (row `m` of an `M x K'` matrix) and bias
/// `b_m`; a set `X` is embedded as `e_m = sum_i act(v_m . x_i + b_m)`. The sum
/// is not normalized by cardinality and the output length is `M` for every
/// set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanLayer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl SanLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::Dimension {
                op: "san_layer",
                left: weights.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Weights uniform in `±sqrt(6 / (K' + M))`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        outputs: usize,
        input_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = glorot_uniform(vec![outputs, input_dim], input_dim, outputs, rng)?;
        Self::new(weights, Tensor::zeros(vec![outputs])?, activation)
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Pre-activation `v_m . x + b_m` of neuron `m` for one element.
    pub fn preactivation(&self, m: usize, x: &[f64]) -> f64 {
        let k = self.input_dim();
        let v = &self.weights.data()[m * k..(m + 1) * k];
        v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias.data()[m]
    }

    /// Embeds `set` into `R^M`, summing rows in ascending stored order.
    pub fn aggregate(&self, set: &FeatureSet) -> Result<Vec<f64>> {
        if set.dim() != self.input_dim() {
            return Err(Error::Dimension {
                op: "san_aggregate",
                left: self.weights.shape().to_vec(),
                right: vec![set.cardinality(), set.dim()],
            });
        }
        let mut out = vec![0.0; self.outputs()];
        for row in set.rows() {
            for (m, o) in out.iter_mut().enumerate() {
                *o += self.activation.eval(self.preactivation(m, row));
            }
        }
        Ok(out)
    }
}

/// Records `sum_i act(V x_i + b)` on the tape for a `[n, K']` set node,
/// `[M, K']` weights and `[M]` bias; the result has shape `[M]`.
pub fn san_aggregate_node(
    g: &mut Graph,
    set: NodeId,
    weights: NodeId,
    bias: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let vt = g.transpose(weights)?;
    let proj = g.matmul(set, vt)?;
    let pre = g.add(proj, bias)?;
    let act = activation.node(g, pre)?;
    g.reduce_sum(act, 0)
}

pub(crate) fn glorot_uniform<R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data)
}
