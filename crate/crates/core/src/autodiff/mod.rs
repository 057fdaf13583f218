//! Dense reverse-mode automatic differentiation with support for
//! differentiating through a recorded gradient step.
//!
//! Gradients are built as new nodes of the same [`Graph`], so a gradient
//! step `theta' = theta - alpha * grad L(theta)` stays differentiable with
//! respect to `theta`. That is what the outer meta-update needs: the
//! derivative of a loss evaluated at `theta'` picks up the
//! `-alpha * H * v` Hessian-vector term automatically.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId, Op, PROB_CLAMP};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows: expected {expected} columns, found {found}")]
    RaggedRows { expected: usize, found: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported input shape {shape:?}")]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("{op} takes {expected} inputs, got {found}")]
    Arity {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("node {id} is not scalar (shape {shape:?})")]
    NotScalar { id: NodeId, shape: Vec<usize> },
    #[error("node {0} is not a leaf")]
    NotLeaf(NodeId),
    #[error("step size must be finite and non-negative, got {0}")]
    InvalidStep(f64),
    #[error("{0}")]
    InvalidArgument(String),
}

/// How the inner gradient step is exposed to the outer derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StepMode {
    /// Differentiate through the inner gradient (second-order).
    #[default]
    Exact,
    /// Treat the inner gradient as a constant, so `d theta'/d theta = I`.
    FirstOrder,
}

impl Graph {
    /// Gradient of the scalar `loss` with respect to each leaf in `wrt`.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, AutodiffError> {
        if let Some(&bad) = wrt.iter().find(|&&w| !self.is_leaf(w)) {
            return Err(AutodiffError::NotLeaf(bad));
        }
        let nodes = self.gradient_nodes(loss, wrt)?;
        Ok(nodes.into_iter().map(|id| self.value(id).clone()).collect())
    }

    /// Records `params - alpha * d loss / d params` and returns the ids of
    /// the updated parameters.
    ///
    /// `params` need not be leaves, so steps can be chained.
    pub fn gradient_step(
        &mut self,
        loss: NodeId,
        params: &[NodeId],
        alpha: f64,
        mode: StepMode,
    ) -> Result<Vec<NodeId>, AutodiffError> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(AutodiffError::InvalidStep(alpha));
        }
        let grads = self.gradient_nodes(loss, params)?;
        params
            .iter()
            .zip(grads)
            .map(|(&p, g)| {
                let g = match mode {
                    StepMode::Exact => g,
                    StepMode::FirstOrder => {
                        let detached = self.value(g).clone();
                        self.constant(detached)?
                    }
                };
                let step = self.forward_op(Op::Scale(alpha), &[g])?;
                self.forward_op(Op::Sub, &[p, step])
            })
            .collect()
    }

    /// Derivative of an outer loss evaluated at `theta' = theta - alpha *
    /// grad inner_loss(theta)` with respect to the leaves `theta`.
    ///
    /// `outer` receives the adapted parameter ids and must return the
    /// scalar outer loss built from them.
    pub fn grad_through_step<F>(
        &mut self,
        inner_loss: NodeId,
        theta: &[NodeId],
        alpha: f64,
        mode: StepMode,
        outer: F,
    ) -> Result<Vec<Tensor>, AutodiffError>
    where
        F: FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId, AutodiffError>,
    {
        let adapted = self.gradient_step(inner_loss, theta, alpha, mode)?;
        let outer_loss = outer(self, &adapted)?;
        self.grad(outer_loss, theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn scalar_param(g: &mut Graph, v: f64) -> NodeId {
        g.param(Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn matmul_example() {
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let b = g
            .constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap())
            .unwrap();
        let c = g.forward_op(Op::MatMul, &[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn sigmoid_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0])).unwrap();
        let y = g.forward_op(Op::Sigmoid, &[x]).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn weighted_bce_example() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.5, 0.5])).unwrap();
        let op = Op::WeightedBce {
            labels: Arc::new(Tensor::vector(vec![1.0, 0.0])),
            weights: Arc::new(Tensor::vector(vec![2.0, 1.0])),
        };
        let l = g.forward_op(op, &[p]).unwrap();
        let by_hand = (2.0 * -(0.5f64).ln() + 1.0 * -(0.5f64).ln()) / 3.0;
        assert!((g.value(l).item().unwrap() - by_hand).abs() < 1e-15);
        assert!((by_hand - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.forward_op(Op::MatMul, &[a, b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(
            g.forward_op(Op::Ln, &[x]).unwrap_err(),
            AutodiffError::NonFinite { op: "ln" }
        );
        assert!(g.constant(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 3.0);
        let y = g.forward_op(Op::Mul, &[x, x]).unwrap();
        let d = g.grad(y, &[x]).unwrap();
        assert_eq!(d[0].item(), Some(6.0));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 0.0);
        let y = g.forward_op(Op::Sigmoid, &[x]).unwrap();
        assert_eq!(g.grad(y, &[x]).unwrap()[0].item(), Some(0.25));
    }

    #[test]
    fn grad_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.forward_op(Op::Scale(2.0), &[x]).unwrap();
        assert!(matches!(
            g.grad(y, &[x]),
            Err(AutodiffError::NotScalar { .. })
        ));
        let s = g.forward_op(Op::Sum, &[y]).unwrap();
        assert_eq!(g.grad(s, &[y]).unwrap_err(), AutodiffError::NotLeaf(y));
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 2.0);
        let z = g.param(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let y = g.forward_op(Op::Mul, &[x, x]).unwrap();
        let d = g.grad(y, &[z]).unwrap();
        assert_eq!(d[0], Tensor::zeros(&[2]));
    }

    #[test]
    fn through_step_square_example() {
        // f(t) = t^2, g(t') = t'^2, alpha = 0.1 at t = 1
        let mut g = Graph::new();
        let t = scalar_param(&mut g, 1.0);
        let inner = g.forward_op(Op::Mul, &[t, t]).unwrap();
        let d = g
            .grad_through_step(inner, &[t], 0.1, StepMode::Exact, |g, adapted| {
                g.forward_op(Op::Mul, &[adapted[0], adapted[0]])
            })
            .unwrap();
        let expected = 2.0 * 0.8 * (1.0 - 0.2);
        assert!((d[0].item().unwrap() - expected).abs() < 1e-15);
        assert!((expected - 1.28f64).abs() < 1e-15);
    }

    #[test]
    fn first_order_drops_hessian_term() {
        let mut g = Graph::new();
        let t = scalar_param(&mut g, 1.0);
        let inner = g.forward_op(Op::Mul, &[t, t]).unwrap();
        let d = g
            .grad_through_step(inner, &[t], 0.1, StepMode::FirstOrder, |g, a| {
                g.forward_op(Op::Mul, &[a[0], a[0]])
            })
            .unwrap();
        assert!((d[0].item().unwrap() - 1.6).abs() < 1e-15);
    }

    #[test]
    fn zero_step_reduces_to_plain_gradient() {
        for mode in [StepMode::Exact, StepMode::FirstOrder] {
            let mut g = Graph::new();
            let t = scalar_param(&mut g, 0.7);
            let inner = g.forward_op(Op::Tanh, &[t]).unwrap();
            let d = g
                .grad_through_step(inner, &[t], 0.0, mode, |g, a| {
                    let s = g.forward_op(Op::Sigmoid, &[a[0]])?;
                    g.forward_op(Op::Mul, &[s, a[0]])
                })
                .unwrap();

            let mut h = Graph::new();
            let t = scalar_param(&mut h, 0.7);
            let s = h.forward_op(Op::Sigmoid, &[t]).unwrap();
            let o = h.forward_op(Op::Mul, &[s, t]).unwrap();
            let plain = h.grad(o, &[t]).unwrap();
            assert_eq!(d[0].data()[0].to_bits(), plain[0].data()[0].to_bits());
        }
    }

    #[test]
    fn negative_step_rejected() {
        let mut g = Graph::new();
        let t = scalar_param(&mut g, 1.0);
        let inner = g.forward_op(Op::Mul, &[t, t]).unwrap();
        assert_eq!(
            g.gradient_step(inner, &[t], -0.1, StepMode::Exact)
                .unwrap_err(),
            AutodiffError::InvalidStep(-0.1)
        );
    }
}
