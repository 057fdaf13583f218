//! Four-layer fully-connected classifier shared by the meta-learner and
//! every baseline, plus its loss and optimizers.

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use optim::{sgd_step, Adam};

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId, Op, Tensor, PROB_CLAMP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn op(self) -> Op {
        match self {
            Activation::Tanh => Op::Tanh,
            Activation::Relu => Op::Relu,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: [usize; 3],
    pub activation: Activation,
    pub n_heads: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: [64, 64, 32],
            activation: Activation::Tanh,
            n_heads: 1,
        }
    }

    pub fn with_hidden(mut self, hidden_dims: [usize; 3]) -> Self {
        self.hidden_dims = hidden_dims;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_heads(mut self, n_heads: usize) -> Self {
        self.n_heads = n_heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) || self.n_heads == 0 {
            return Err(Error::Config(format!(
                "network dimensions must be positive: input {}, hidden {:?}, heads {}",
                self.input_dim, self.hidden_dims, self.n_heads
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each of the four layers.
    pub fn layer_dims(&self) -> [(usize, usize); 4] {
        let [h1, h2, h3] = self.hidden_dims;
        [
            (self.input_dim, h1),
            (h1, h2),
            (h2, h3),
            (h3, self.n_heads),
        ]
    }

    /// Shapes of the flat parameter list: weight then bias, per layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .iter()
            .flat_map(|&(i, o)| [vec![i, o], vec![o]])
            .collect()
    }
}

/// Network parameters as a flat ordered list `[W1, b1, ..., W4, b4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    config: MlpConfig,
    tensors: Vec<Tensor>,
}

impl MlpParams {
    pub fn from_tensors(config: MlpConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Dimension {
                what: "parameter tensors",
                expected: shapes.len(),
                found: tensors.len(),
            });
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(Error::Config(format!(
                    "parameter shape {:?} does not match expected {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        let tensors = config.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self::from_tensors(config, tensors)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(config: MlpConfig, flat: &[f64]) -> Result<Self> {
        let shapes = config.param_shapes();
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(Error::Dimension {
                what: "flat parameter length",
                expected: total,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Self::from_tensors(config, tensors)
    }

    /// Adds every tensor to `graph` as a differentiable leaf.
    pub fn to_graph(&self, graph: &mut Graph) -> Result<Vec<NodeId>> {
        self.tensors
            .iter()
            .map(|t| graph.param(t.clone()).map_err(Error::from))
            .collect()
    }

    /// Rebuilds parameters from the values of graph nodes.
    pub fn from_graph(&self, graph: &Graph, ids: &[NodeId]) -> Result<Self> {
        let tensors = ids.iter().map(|&id| graph.value(id).clone()).collect();
        Self::from_tensors(self.config.clone(), tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Glorot-uniform weights and zero biases, deterministic per seed.
pub fn init_params(config: &MlpConfig, seed: u64) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(8);
    for (fan_in, fan_out) in config.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-limit, limit);
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
        tensors.push(Tensor::new(vec![fan_in, fan_out], data)?);
        tensors.push(Tensor::zeros(&[fan_out]));
    }
    MlpParams::from_tensors(config.clone(), tensors)
}

/// Records the network on `graph` and returns the `[n, n_heads]` logits.
pub fn logits_node(
    graph: &mut Graph,
    config: &MlpConfig,
    params: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let cols = graph.value(x).dims2().map(|(_, c)| c);
    if cols != Some(config.input_dim) {
        return Err(Error::Dimension {
            what: "input columns",
            expected: config.input_dim,
            found: cols.unwrap_or(0),
        });
    }
    if params.len() != 8 {
        return Err(Error::Dimension {
            what: "parameter tensors",
            expected: 8,
            found: params.len(),
        });
    }
    let mut h = x;
    for layer in 0..4 {
        h = graph.forward_op(Op::MatMul, &[h, params[2 * layer]])?;
        h = graph.forward_op(Op::AddBias, &[h, params[2 * layer + 1]])?;
        if layer < 3 {
            h = graph.forward_op(config.activation.op(), &[h])?;
        }
    }
    Ok(h)
}

/// Records `sigmoid(logits[:, head])`, shape `[n]`.
pub fn prob_node(
    graph: &mut Graph,
    config: &MlpConfig,
    params: &[NodeId],
    x: NodeId,
    head: usize,
) -> Result<NodeId> {
    check_head(config, head)?;
    let logits = logits_node(graph, config, params, x)?;
    let column = graph.forward_op(Op::Column(head), &[logits])?;
    Ok(graph.forward_op(Op::Sigmoid, &[column])?)
}

/// Records the weighted cross-entropy of `probs` against constant labels.
pub fn bce_node(graph: &mut Graph, probs: NodeId, labels: &[f64], weights: &[f64]) -> Result<NodeId> {
    let op = Op::WeightedBce {
        labels: Arc::new(Tensor::vector(labels.to_vec())),
        weights: Arc::new(Tensor::vector(weights.to_vec())),
    };
    Ok(graph.forward_op(op, &[probs])?)
}

fn check_head(config: &MlpConfig, head: usize) -> Result<()> {
    if head >= config.n_heads {
        return Err(Error::Dimension {
            what: "head index bound",
            expected: config.n_heads,
            found: head,
        });
    }
    Ok(())
}

/// Raw network outputs `[n, n_heads]` without a graph.
pub fn forward_logits(params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let x = graph.constant(x.clone())?;
    let ids: Vec<NodeId> = params
        .tensors()
        .iter()
        .map(|t| graph.constant(t.clone()))
        .collect::<std::result::Result<_, _>>()?;
    let out = logits_node(&mut graph, params.config(), &ids, x)?;
    Ok(graph.value(out).clone())
}

/// Per-row probabilities from output head `head`.
pub fn forward(params: &MlpParams, x: &Tensor, head: usize) -> Result<Vec<f64>> {
    check_head(params.config(), head)?;
    let logits = forward_logits(params, x)?;
    let (n, m) = logits.dims2().expect("matrix logits");
    Ok((0..n).map(|i| sigmoid(logits.data()[i * m + head])).collect())
}

/// `(sum_i w_i * BCE_i) / (sum_i w_i)` with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce(pred: &[f64], labels: &[f64], weights: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for (what, v) in [("labels", labels), ("weights", weights)] {
        if v.len() != pred.len() {
            return Err(Error::Dimension {
                what,
                expected: pred.len(),
                found: v.len(),
            });
        }
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Config("loss weights must be positive".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &y), &w) in pred.iter().zip(labels).zip(weights) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        num += w * -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        den += w;
    }
    Ok(num / den)
}
