use std::sync::Arc;

use super::tensor::{self, Tensor};
use super::AutodiffError;

pub type NodeId = usize;

/// Lower and upper probability bounds applied before taking logarithms in
/// the cross-entropy loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Differentiable operation kinds.
///
/// Every backward rule is itself expressed with these operations, so any
/// gradient computed on a [`Graph`] can be differentiated again.
#[derive(Clone, Debug)]
pub enum Op {
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul,
    Transpose,
    /// Elementwise, identical shapes.
    Add,
    Sub,
    Mul,
    /// `[n,m] + [m]`, the bias vector broadcast over rows.
    AddBias,
    /// Column sums `[n,m] -> [m]`.
    SumRows,
    /// `[m] -> [n,m]`
    BroadcastRows(usize),
    /// Row sums `[n,m] -> [n]`.
    SumCols,
    /// `[n] -> [n,m]`
    BroadcastCols(usize),
    Scale(f64),
    Shift(f64),
    /// Elementwise product with a constant tensor of the same shape.
    MulConst(Arc<Tensor>),
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Ln,
    Recip,
    Clamp { lo: f64, hi: f64 },
    /// Indicator of `x > 0`. Zero derivative.
    ReluMask,
    /// Indicator of `lo <= x <= hi`. Zero derivative.
    ClampMask { lo: f64, hi: f64 },
    /// Sum of all entries to a scalar.
    Sum,
    /// Scalar to the given shape.
    BroadcastScalar(Vec<usize>),
    /// Column `j` of a matrix, `[n,m] -> [n]`.
    Column(usize),
    /// `[n] -> [n,width]` with the input placed in column `index`.
    EmbedColumn { index: usize, width: usize },
    /// Row-wise `x - logsumexp(x)`.
    LogSoftmaxRows,
    /// Weighted binary cross-entropy of probabilities against constant
    /// labels: `-(sum w_i [y_i ln p_i + (1-y_i) ln(1-p_i)]) / sum w_i`
    /// with `p` clamped to `[1e-7, 1-1e-7]`. Expands into primitive nodes.
    WeightedBce {
        labels: Arc<Tensor>,
        weights: Arc<Tensor>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add-broadcast",
            Op::SumRows => "sum-rows",
            Op::BroadcastRows(_) => "broadcast-rows",
            Op::SumCols => "sum-cols",
            Op::BroadcastCols(_) => "broadcast-cols",
            Op::Scale(_) => "scalar-mul",
            Op::Shift(_) => "scalar-add",
            Op::MulConst(_) => "mul-const",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Recip => "recip",
            Op::Clamp { .. } => "clamp",
            Op::ReluMask => "relu-mask",
            Op::ClampMask { .. } => "clamp-mask",
            Op::Sum => "sum",
            Op::BroadcastScalar(_) => "broadcast-scalar",
            Op::Column(_) => "column",
            Op::EmbedColumn { .. } => "embed-column",
            Op::LogSoftmaxRows => "log-softmax-rows",
            Op::WeightedBce { .. } => "weighted-bce",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::AddBias => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Param,
    Constant,
    Op(Op),
}

#[derive(Clone, Debug)]
struct Node {
    kind: Kind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only define-by-run computation graph.
///
/// Node ids are topologically ordered: every input id is smaller than the
/// id of the node consuming it.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.leaf(Kind::Param, value)
    }

    /// Adds a leaf that is treated as data.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, AutodiffError> {
        self.leaf(Kind::Constant, value)
    }

    fn leaf(&mut self, kind: Kind, value: Tensor) -> Result<NodeId, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            kind,
            inputs: Vec::new(),
            value,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        id < self.nodes.len() && !matches!(self.nodes[id].kind, Kind::Op(_))
    }

    /// Ids of the differentiable leaves, in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, Kind::Param))
            .map(|(i, _)| i)
            .collect()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Appends `op` applied to `inputs` and returns the id of its output.
    pub fn forward_op(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if inputs.len() != op.arity() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: op.arity(),
                found: inputs.len(),
            });
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode(bad));
        }
        if let Op::WeightedBce { labels, weights } = &op {
            return self.weighted_bce_nodes(inputs[0], labels.clone(), weights.clone());
        }
        let value = self.compute(&op, inputs)?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            kind: Kind::Op(op),
            inputs: inputs.to_vec(),
            value,
        });
        Ok(self.nodes.len() - 1)
    }

    fn compute(&self, op: &Op, inputs: &[NodeId]) -> Result<Tensor, AutodiffError> {
        let a = &self.nodes[inputs[0]].value;
        let mismatch = |b: &Tensor| AutodiffError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let bad = || AutodiffError::BadShape {
            op: op.name(),
            shape: a.shape().to_vec(),
        };
        let out = match op {
            Op::MatMul => {
                let b = &self.nodes[inputs[1]].value;
                match (a.dims2(), b.dims2()) {
                    (Some((_, k)), Some((k2, _))) if k == k2 => tensor::matmul(a, b),
                    _ => return Err(mismatch(b)),
                }
            }
            Op::Transpose => {
                a.dims2().ok_or_else(bad)?;
                tensor::transpose(a)
            }
            Op::Add | Op::Sub | Op::Mul => {
                let b = &self.nodes[inputs[1]].value;
                if a.shape() != b.shape() {
                    return Err(mismatch(b));
                }
                match op {
                    Op::Add => a.zip_map(b, |x, y| x + y),
                    Op::Sub => a.zip_map(b, |x, y| x - y),
                    _ => a.zip_map(b, |x, y| x * y),
                }
            }
            Op::AddBias => {
                let b = &self.nodes[inputs[1]].value;
                let (n, m) = a.dims2().ok_or_else(|| mismatch(b))?;
                if b.shape() != [m] {
                    return Err(mismatch(b));
                }
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(m) {
                    for (v, bias) in row.iter_mut().zip(b.data()) {
                        *v += bias;
                    }
                }
                Tensor::new(vec![n, m], data)?
            }
            Op::SumRows => {
                let (n, m) = a.dims2().ok_or_else(bad)?;
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(a.row(i)) {
                        *o += v;
                    }
                }
                Tensor::vector(out)
            }
            Op::BroadcastRows(n) => {
                if a.rank() != 1 {
                    return Err(bad());
                }
                let m = a.numel();
                let mut data = Vec::with_capacity(n * m);
                for _ in 0..*n {
                    data.extend_from_slice(a.data());
                }
                Tensor::new(vec![*n, m], data)?
            }
            Op::SumCols => {
                let (n, _) = a.dims2().ok_or_else(bad)?;
                Tensor::vector((0..n).map(|i| a.row(i).iter().sum()).collect())
            }
            Op::BroadcastCols(m) => {
                if a.rank() != 1 {
                    return Err(bad());
                }
                let n = a.numel();
                let mut data = Vec::with_capacity(n * m);
                for &v in a.data() {
                    data.extend(std::iter::repeat(v).take(*m));
                }
                Tensor::new(vec![n, *m], data)?
            }
            Op::Scale(c) => a.map(|x| c * x),
            Op::Shift(c) => a.map(|x| x + c),
            Op::MulConst(t) => {
                if a.shape() != t.shape() {
                    return Err(mismatch(t));
                }
                a.zip_map(t, |x, y| x * y)
            }
            Op::Sigmoid => a.map(sigmoid),
            Op::Tanh => a.map(f64::tanh),
            Op::Relu => a.map(|x| x.max(0.0)),
            Op::Exp => a.map(f64::exp),
            Op::Ln => a.map(f64::ln),
            Op::Recip => a.map(f64::recip),
            Op::Clamp { lo, hi } => a.map(|x| x.clamp(*lo, *hi)),
            Op::ReluMask => a.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::ClampMask { lo, hi } => a.map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }),
            Op::Sum => Tensor::scalar(a.data().iter().sum()),
            Op::BroadcastScalar(shape) => {
                let v = a.item().ok_or_else(bad)?;
                Tensor::filled(shape, v)
            }
            Op::Column(j) => {
                let (n, m) = a.dims2().ok_or_else(bad)?;
                if *j >= m {
                    return Err(bad());
                }
                Tensor::vector((0..n).map(|i| a.data()[i * m + j]).collect())
            }
            Op::EmbedColumn { index, width } => {
                if a.rank() != 1 || index >= width {
                    return Err(bad());
                }
                let n = a.numel();
                let mut data = vec![0.0; n * width];
                for (i, v) in a.data().iter().enumerate() {
                    data[i * width + index] = *v;
                }
                Tensor::new(vec![n, *width], data)?
            }
            Op::LogSoftmaxRows => {
                let (n, m) = a.dims2().ok_or_else(bad)?;
                let mut data = Vec::with_capacity(n * m);
                for i in 0..n {
                    let row = a.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    data.extend(row.iter().map(|v| v - lse));
                }
                Tensor::new(vec![n, m], data)?
            }
            Op::WeightedBce { .. } => unreachable!("expanded before compute"),
        };
        Ok(out)
    }

    fn weighted_bce_nodes(
        &mut self,
        probs: NodeId,
        labels: Arc<Tensor>,
        weights: Arc<Tensor>,
    ) -> Result<NodeId, AutodiffError> {
        let shape = self.shape(probs).to_vec();
        for t in [&labels, &weights] {
            if t.shape() != shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "weighted-bce",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if labels.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(AutodiffError::InvalidArgument(
                "weighted-bce labels must lie in [0, 1]".into(),
            ));
        }
        if weights.data().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(AutodiffError::InvalidArgument(
                "weighted-bce weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.data().iter().sum();
        if total <= 0.0 {
            return Err(AutodiffError::InvalidArgument(
                "weighted-bce needs a positive total weight".into(),
            ));
        }
        let pos = labels.zip_map(&weights, |y, w| -w * y / total);
        let neg = labels.zip_map(&weights, |y, w| -w * (1.0 - y) / total);

        let clamped = self.forward_op(
            Op::Clamp {
                lo: PROB_CLAMP,
                hi: 1.0 - PROB_CLAMP,
            },
            &[probs],
        )?;
        let log_p = self.forward_op(Op::Ln, &[clamped])?;
        let one_minus = self.forward_op(Op::Scale(-1.0), &[clamped])?;
        let one_minus = self.forward_op(Op::Shift(1.0), &[one_minus])?;
        let log_q = self.forward_op(Op::Ln, &[one_minus])?;
        let a = self.forward_op(Op::MulConst(Arc::new(pos)), &[log_p])?;
        let b = self.forward_op(Op::MulConst(Arc::new(neg)), &[log_q])?;
        let s = self.forward_op(Op::Add, &[a, b])?;
        self.forward_op(Op::Sum, &[s])
    }

    /// Emits nodes for the contribution of `grad_out` (the adjoint of node
    /// `id`) to each input that `needs` a gradient.
    fn backward(
        &mut self,
        id: NodeId,
        grad_out: NodeId,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, AutodiffError> {
        let op = match &self.nodes[id].kind {
            Kind::Op(op) => op.clone(),
            _ => return Ok(Vec::new()),
        };
        let inputs = self.nodes[id].inputs.clone();
        let a = inputs[0];
        let need_a = needs[a];
        let need_b = inputs.get(1).map_or(false, |&b| needs[b]);
        let g = grad_out;
        let mut out = Vec::with_capacity(2);
        match op {
            Op::MatMul => {
                let b = inputs[1];
                if need_a {
                    let bt = self.forward_op(Op::Transpose, &[b])?;
                    out.push((a, self.forward_op(Op::MatMul, &[g, bt])?));
                }
                if need_b {
                    let at = self.forward_op(Op::Transpose, &[a])?;
                    out.push((b, self.forward_op(Op::MatMul, &[at, g])?));
                }
            }
            Op::Transpose => out.push((a, self.forward_op(Op::Transpose, &[g])?)),
            Op::Add => {
                if need_a {
                    out.push((a, g));
                }
                if need_b {
                    out.push((inputs[1], g));
                }
            }
            Op::Sub => {
                if need_a {
                    out.push((a, g));
                }
                if need_b {
                    out.push((inputs[1], self.forward_op(Op::Scale(-1.0), &[g])?));
                }
            }
            Op::Mul => {
                let b = inputs[1];
                if need_a {
                    out.push((a, self.forward_op(Op::Mul, &[g, b])?));
                }
                if need_b {
                    out.push((b, self.forward_op(Op::Mul, &[g, a])?));
                }
            }
            Op::AddBias => {
                if need_a {
                    out.push((a, g));
                }
                if need_b {
                    out.push((inputs[1], self.forward_op(Op::SumRows, &[g])?));
                }
            }
            Op::SumRows => {
                let n = self.shape(a)[0];
                out.push((a, self.forward_op(Op::BroadcastRows(n), &[g])?));
            }
            Op::BroadcastRows(_) => out.push((a, self.forward_op(Op::SumRows, &[g])?)),
            Op::SumCols => {
                let m = self.shape(a)[1];
                out.push((a, self.forward_op(Op::BroadcastCols(m), &[g])?));
            }
            Op::BroadcastCols(_) => out.push((a, self.forward_op(Op::SumCols, &[g])?)),
            Op::Scale(c) => out.push((a, self.forward_op(Op::Scale(c), &[g])?)),
            Op::Shift(_) => out.push((a, g)),
            Op::MulConst(t) => out.push((a, self.forward_op(Op::MulConst(t), &[g])?)),
            Op::Sigmoid => {
                // s (1 - s)
                let s = id;
                let neg = self.forward_op(Op::Scale(-1.0), &[s])?;
                let one_minus = self.forward_op(Op::Shift(1.0), &[neg])?;
                let local = self.forward_op(Op::Mul, &[s, one_minus])?;
                out.push((a, self.forward_op(Op::Mul, &[g, local])?));
            }
            Op::Tanh => {
                // 1 - t^2
                let t = id;
                let sq = self.forward_op(Op::Mul, &[t, t])?;
                let neg = self.forward_op(Op::Scale(-1.0), &[sq])?;
                let local = self.forward_op(Op::Shift(1.0), &[neg])?;
                out.push((a, self.forward_op(Op::Mul, &[g, local])?));
            }
            Op::Relu => {
                let mask = self.forward_op(Op::ReluMask, &[a])?;
                out.push((a, self.forward_op(Op::Mul, &[g, mask])?));
            }
            Op::Exp => out.push((a, self.forward_op(Op::Mul, &[g, id])?)),
            Op::Ln => {
                let r = self.forward_op(Op::Recip, &[a])?;
                out.push((a, self.forward_op(Op::Mul, &[g, r])?));
            }
            Op::Recip => {
                let sq = self.forward_op(Op::Mul, &[id, id])?;
                let gs = self.forward_op(Op::Mul, &[g, sq])?;
                out.push((a, self.forward_op(Op::Scale(-1.0), &[gs])?));
            }
            Op::Clamp { lo, hi } => {
                let mask = self.forward_op(Op::ClampMask { lo, hi }, &[a])?;
                out.push((a, self.forward_op(Op::Mul, &[g, mask])?));
            }
            Op::ReluMask | Op::ClampMask { .. } => {}
            Op::Sum => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.forward_op(Op::BroadcastScalar(shape), &[g])?));
            }
            Op::BroadcastScalar(_) => {
                let summed = self.forward_op(Op::Sum, &[g])?;
                let target = self.shape(a).to_vec();
                // restore the scalar's own shape, e.g. [1] or [1,1]
                let fixed = if target.is_empty() {
                    summed
                } else {
                    self.forward_op(Op::BroadcastScalar(target), &[summed])?
                };
                out.push((a, fixed));
            }
            Op::Column(index) => {
                let width = self.shape(a)[1];
                out.push((a, self.forward_op(Op::EmbedColumn { index, width }, &[g])?));
            }
            Op::EmbedColumn { index, .. } => {
                out.push((a, self.forward_op(Op::Column(index), &[g])?))
            }
            Op::LogSoftmaxRows => {
                // g - softmax * rowsum(g)
                let m = self.shape(a)[1];
                let row_sum = self.forward_op(Op::SumCols, &[g])?;
                let spread = self.forward_op(Op::BroadcastCols(m), &[row_sum])?;
                let soft = self.forward_op(Op::Exp, &[id])?;
                let prod = self.forward_op(Op::Mul, &[spread, soft])?;
                out.push((a, self.forward_op(Op::Sub, &[g, prod])?));
            }
            Op::WeightedBce { .. } => unreachable!("never stored as a node"),
        }
        Ok(out)
    }

    /// Builds adjoint nodes of `loss` with respect to each of `wrt`.
    ///
    /// The returned nodes are ordinary graph nodes and can be differentiated
    /// again. Inputs that `loss` does not depend on get a zero constant.
    pub fn gradient_nodes(
        &mut self,
        loss: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>, AutodiffError> {
        if loss >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(loss));
        }
        if let Some(&bad) = wrt.iter().find(|&&w| w >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode(bad));
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NotScalar {
                id: loss,
                shape: self.shape(loss).to_vec(),
            });
        }

        let end = loss + 1;
        let mut needs = vec![false; end];
        for &w in wrt {
            if w < end {
                needs[w] = true;
            }
        }
        for i in 0..end {
            if !needs[i] && self.nodes[i].inputs.iter().any(|&j| needs[j]) {
                needs[i] = true;
            }
        }

        let seed = Tensor::filled(self.shape(loss), 1.0);
        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if needs[loss] {
            adjoint[loss] = Some(self.constant(seed)?);
        }
        for id in (0..end).rev() {
            let Some(g) = adjoint[id] else { continue };
            if !needs[id] {
                continue;
            }
            for (input, contribution) in self.backward(id, g, &needs)? {
                adjoint[input] = Some(match adjoint[input] {
                    None => contribution,
                    Some(acc) => self.forward_op(Op::Add, &[acc, contribution])?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    self.constant(zeros)
                }
            })
            .collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
