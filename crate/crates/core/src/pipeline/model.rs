use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::SanLayer;
use crate::aggregation::{
    conv1x1_node, flatten_node, pool_node, position_columns, san_aggregate_node, AggregatorKind, FeatureSet, PoolKind,
    PositionalMode,
};
use crate::autodiff::{Graph, NodeId};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-element feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extractor {
    /// Elements pass through unchanged (image pixels become channel vectors).
    Identity,
    /// Dense layers applied to every element, each followed by ReLU.
    Mlp { widths: Vec<usize> },
    /// `conv k x k -> relu`, repeated per entry of `channels` with a 2x2 max
    /// pool between consecutive convolutions. Image inputs only.
    Conv { channels: Vec<usize>, kernel: usize },
}

/// Classifier head applied to the aggregated vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Logits are the aggregated vector itself.
    Identity,
    /// ReLU dense layers of the given widths, then a linear layer to the classes.
    Dense { hidden: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    /// Raw feature sets with `dim` columns.
    Set { dim: usize },
    /// `[H, W, channels]` images of any spatial size.
    Image { channels: usize },
}

/// Architecture of an extractor -> aggregator -> head classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputKind,
    pub extractor: Extractor,
    pub positional: PositionalMode,
    pub aggregator: AggregatorKind,
    pub head: Head,
    pub classes: usize,
    /// Number of elements reaching the aggregator. Required by the
    /// order-sensitive aggregators, ignored by the others.
    pub cardinality: Option<usize>,
}

impl ModelSpec {
    /// A set classifier with an MLP extractor and a dense head.
    pub fn set_classifier(
        input_dim: usize,
        extractor_widths: Vec<usize>,
        aggregator: AggregatorKind,
        head_hidden: Vec<usize>,
        classes: usize,
    ) -> Self {
        Self {
            input: InputKind::Set { dim: input_dim },
            extractor: if extractor_widths.is_empty() {
                Extractor::Identity
            } else {
                Extractor::Mlp {
                    widths: extractor_widths,
                }
            },
            positional: PositionalMode::None,
            aggregator,
            head: Head::Dense { hidden: head_hidden },
            classes,
            cardinality: None,
        }
    }

    /// The small convolutional image classifier: `conv 3x3x8 -> maxpool 2x2
    /// -> conv 3x3x16 -> aggregator -> dense`, with normalized grid positions.
    pub fn small_image_classifier(channels: usize, aggregator: AggregatorKind, classes: usize) -> Self {
        let head_hidden = match aggregator {
            AggregatorKind::San { .. } => Vec::new(),
            _ => vec![32],
        };
        Self {
            input: InputKind::Image { channels },
            extractor: Extractor::Conv {
                channels: vec![8, 16],
                kernel: 3,
            },
            positional: PositionalMode::Normalized2d,
            aggregator,
            head: Head::Dense { hidden: head_hidden },
            classes,
            cardinality: None,
        }
    }

    fn input_dim(&self) -> usize {
        match self.input {
            InputKind::Set { dim } => dim,
            InputKind::Image { channels } => channels,
        }
    }

    /// Feature dimension produced by the extractor, before positions.
    pub fn feature_dim(&self) -> usize {
        match &self.extractor {
            Extractor::Identity => self.input_dim(),
            Extractor::Mlp { widths } => *widths.last().expect("validated non-empty"),
            Extractor::Conv { channels, .. } => *channels.last().expect("validated non-empty"),
        }
    }

    /// Feature dimension entering the aggregator.
    pub fn aggregator_input_dim(&self) -> usize {
        self.feature_dim() + self.positional.width()
    }

    /// Spatial size after the convolution stack, or `None` if too small.
    fn conv_output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let Extractor::Conv { channels, kernel } = &self.extractor else {
            return Some((h, w));
        };
        let (mut h, mut w) = (h, w);
        for i in 0..channels.len() {
            if i > 0 {
                if h < 2 || w < 2 {
                    return None;
                }
                h /= 2;
                w /= 2;
            }
            if h < *kernel || w < *kernel {
                return None;
            }
            h = h - kernel + 1;
            w = w - kernel + 1;
        }
        Some((h, w))
    }

    /// Number of elements the aggregator sees for `sample`.
    pub fn feature_cardinality(&self, sample: &Sample) -> Result<usize> {
        match sample {
            Sample::Set(s) => Ok(s.cardinality()),
            Sample::Image(t) => {
                let (h, w) = (t.shape()[0], t.shape()[1]);
                self.conv_output_size(h, w)
                    .map(|(a, b)| a * b)
                    .ok_or_else(|| Error::contract(format!("image of size {h}x{w} is too small for the extractor")))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::contract("model needs at least one class"));
        }
        if self.input_dim() == 0 {
            return Err(Error::contract("input dimension must be positive"));
        }
        match &self.extractor {
            Extractor::Identity => {}
            Extractor::Mlp { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::contract("MLP extractor widths must be non-empty and positive"));
                }
            }
            Extractor::Conv { channels, kernel } => {
                if !matches!(self.input, InputKind::Image { .. }) {
                    return Err(Error::contract("convolutional extractor needs image input"));
                }
                if channels.is_empty() || channels.contains(&0) || *kernel == 0 {
                    return Err(Error::contract("conv extractor needs positive channels and kernel"));
                }
            }
        }
        if let AggregatorKind::San { outputs: 0, .. } = self.aggregator {
            return Err(Error::contract("SAN layer needs at least one output"));
        }
        if !self.aggregator.accepts_variable_cardinality() && self.cardinality.is_none_or(|n| n == 0) {
            return Err(Error::contract(format!(
                "{} aggregator needs a fixed positive cardinality",
                self.aggregator.name()
            )));
        }
        if let Head::Dense { hidden } = &self.head {
            if hidden.contains(&0) {
                return Err(Error::contract("head widths must be positive"));
            }
        }
        if self.head == Head::Identity && self.aggregated_dim() != self.classes {
            return Err(Error::contract(format!(
                "identity head needs the aggregated dimension {} to equal the class count {}",
                self.aggregated_dim(),
                self.classes
            )));
        }
        Ok(())
    }

    fn aggregated_dim(&self) -> usize {
        self.aggregator
            .output_dim(self.aggregator_input_dim(), self.cardinality.unwrap_or(0))
    }
}

/// A classifier with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Tensor>,
    names: Vec<String>,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) {
        self.params.push(t);
        self.names.push(name);
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = crate::aggregation::glorot_uniform(vec![fan_in, fan_out], fan_in, fan_out, self.rng)?;
        self.push(format!("{name}.weight"), w);
        self.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out])?);
        Ok(())
    }
}

impl Model {
    /// Builds a model with seeded fan-scaled uniform weights and zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            names: Vec::new(),
        };

        let mut dim = spec.input_dim();
        match &spec.extractor {
            Extractor::Identity => {}
            Extractor::Mlp { widths } => {
                for (i, &w) in widths.iter().enumerate() {
                    b.dense(&format!("extractor.{i}"), dim, w)?;
                    dim = w;
                }
            }
            Extractor::Conv { channels, kernel } => {
                for (i, &c) in channels.iter().enumerate() {
                    let k = *kernel;
                    let kernel_t =
                        crate::aggregation::glorot_uniform(vec![k, k, dim, c], k * k * dim, k * k * c, b.rng)?;
                    b.push(format!("extractor.conv{i}.kernel"), kernel_t);
                    b.push(format!("extractor.conv{i}.bias"), Tensor::zeros(vec![c])?);
                    dim = c;
                }
            }
        }

        let agg_in = spec.aggregator_input_dim();
        match spec.aggregator {
            AggregatorKind::San { outputs, activation } => {
                let layer = SanLayer::init(outputs, agg_in, activation, b.rng)?;
                b.push("san.weight".into(), layer.weights().clone());
                b.push("san.bias".into(), layer.bias().clone());
            }
            AggregatorKind::Conv1x1 => {
                let w = crate::aggregation::glorot_uniform(vec![agg_in, 1], agg_in, 1, b.rng)?;
                b.push("conv1x1.weight".into(), w);
                b.push("conv1x1.bias".into(), Tensor::zeros(vec![1])?);
            }
            _ => {}
        }

        if let Head::Dense { hidden } = &spec.head {
            let mut d = spec.aggregated_dim();
            for (i, &w) in hidden.iter().chain(std::iter::once(&spec.classes)).enumerate() {
                b.dense(&format!("head.{i}"), d, w)?;
                d = w;
            }
        }

        let Builder { params, names, .. } = b;
        Ok(Self { spec, params, names })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces parameter `index` with a tensor of the same shape.
    pub fn set_param(&mut self, index: usize, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::contract(format!("no parameter {index}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_param",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Records the forward pass for one sample, returning `[classes]` logits.
    pub fn forward_graph(&self, g: &mut Graph, params: &[NodeId], sample: &Sample) -> Result<NodeId> {
        let spec = &self.spec;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameters are laid out by Model::new");

        // extractor
        let (mut x, source) = match (sample, &spec.input) {
            (Sample::Set(s), InputKind::Set { dim }) => {
                if s.dim() != *dim {
                    return Err(Error::Dimension {
                        op: "model_forward",
                        left: vec![*dim],
                        right: vec![s.cardinality(), s.dim()],
                    });
                }
                (g.constant(s.to_tensor()), s.source_shape())
            }
            (Sample::Image(t), InputKind::Image { channels }) => {
                if t.rank() != 3 || t.shape()[2] != *channels {
                    return Err(Error::Dimension {
                        op: "model_forward",
                        left: vec![*channels],
                        right: t.shape().to_vec(),
                    });
                }
                let mut img = g.constant(t.clone());
                if let Extractor::Conv { channels, .. } = &spec.extractor {
                    spec.feature_cardinality(sample)?;
                    for i in 0..channels.len() {
                        if i > 0 {
                            img = g.max_pool2d(img)?;
                        }
                        let (k, b) = (next(), next());
                        let c = g.conv2d(img, k, b)?;
                        img = g.relu(c)?;
                    }
                }
                let shape = g.value(img).shape().to_vec();
                let set = g.reshape(img, vec![shape[0] * shape[1], shape[2]])?;
                (set, Some((shape[0], shape[1])))
            }
            _ => return Err(Error::contract("sample kind does not match the model input")),
        };
        if let Extractor::Mlp { widths } = &spec.extractor {
            for _ in widths {
                let (w, b) = (next(), next());
                let h = g.matmul(x, w)?;
                let h = g.add(h, b)?;
                x = g.relu(h)?;
            }
        }

        let n = g.value(x).shape()[0];
        if spec.positional != PositionalMode::None {
            let cols = position_columns(n, source, spec.positional)?;
            let pos = g.constant(Tensor::matrix(n, spec.positional.width(), cols)?);
            x = g.concat_cols(x, pos)?;
        }

        if let Some(expected) = spec
            .cardinality
            .filter(|_| !spec.aggregator.accepts_variable_cardinality())
        {
            if n != expected {
                return Err(Error::contract(format!(
                    "{} aggregator expects cardinality {expected}, got {n}",
                    spec.aggregator.name()
                )));
            }
        }
        let mut z = match spec.aggregator {
            AggregatorKind::San { activation, .. } => {
                let (v, b) = (next(), next());
                san_aggregate_node(g, x, v, b, activation)?
            }
            AggregatorKind::MaxPool => pool_node(g, x, PoolKind::Max)?,
            AggregatorKind::AvgPool => pool_node(g, x, PoolKind::Avg)?,
            AggregatorKind::SumPool => pool_node(g, x, PoolKind::Sum)?,
            AggregatorKind::Flatten => flatten_node(g, x)?,
            AggregatorKind::Conv1x1 => {
                let (w, b) = (next(), next());
                conv1x1_node(g, x, w, b)?
            }
        };

        if let Head::Dense { hidden } = &spec.head {
            let d = g.value(z).numel();
            z = g.reshape(z, vec![1, d])?;
            for i in 0..=hidden.len() {
                let (w, b) = (next(), next());
                let h = g.matmul(z, w)?;
                z = g.add(h, b)?;
                if i < hidden.len() {
                    z = g.relu(z)?;
                }
            }
            z = g.reshape(z, vec![spec.classes])?;
        }
        Ok(z)
    }

    /// Logits for one sample.
    pub fn forward(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward_graph(&mut g, &ids, sample)?;
        Ok(g.value(out).data().to_vec())
    }

    fn batch_graph(&self, batch: &[(&Sample, usize)]) -> Result<(Graph, Vec<NodeId>, NodeId)> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|t| g.param(t.clone())).collect();
        let mut total: Option<NodeId> = None;
        for (sample, label) in batch {
            let logits = self.forward_graph(&mut g, &ids, sample)?;
            let loss = g.softmax_cross_entropy(logits, vec![*label])?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let mean = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
        Ok((g, ids, mean))
    }

    /// Mean softmax cross-entropy over `batch`.
    pub fn loss(&self, batch: &[(&Sample, usize)]) -> Result<f64> {
        let (g, _, loss) = self.batch_graph(batch)?;
        Ok(g.value(loss).data()[0])
    }

    /// Mean loss over `batch` and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &[(&Sample, usize)]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (mut g, ids, loss) = self.batch_graph(batch)?;
        g.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| g.grad(id).expect("parameters receive gradients").to_vec())
            .collect();
        Ok((g.value(loss).data()[0], grads))
    }

    /// Smallest distance of any ReLU input from its kink over `batch`.
    pub fn min_relu_margin(&self, batch: &[(&Sample, usize)]) -> Result<Option<f64>> {
        let (g, _, _) = self.batch_graph(batch)?;
        Ok(g.min_abs_relu_input())
    }
}

/// Turns an `[H, W, C]` feature map into `H * W` depth vectors in row-major
/// spatial order, remembering the grid shape.
pub fn image_to_set(feature_map: &Tensor) -> Result<FeatureSet> {
    let &[h, w, c] = feature_map.shape() else {
        return Err(Error::contract(format!(
            "feature map must be [H, W, C], got {:?}",
            feature_map.shape()
        )));
    };
    FeatureSet::new(h * w, c, feature_map.data().to_vec())?.with_source_shape(h, w)
}
