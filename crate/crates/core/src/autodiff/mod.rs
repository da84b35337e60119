//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Leaves enter the
//! tape through [`Graph::input`] (constant) or [`Graph::param`] (gradient
//! requested); each op appends one node whose value is checked for NaN/Inf
//! before it is returned. [`Graph::backward`] walks the tape in reverse and
//! leaves `d loss / d leaf` on every reachable parameter leaf.

mod broadcast;
mod ops;

pub(crate) use broadcast::{aligned_strides, broadcast_shape, for_each_pair};
pub use ops::{BatchNormState, ConvGeometry, Mode, BN_EPSILON, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use ops::Op;

/// Row-wise softmax of a `[N, K]` matrix, outside any tape.
pub fn softmax_rows<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    ops::softmax(t, t.rank().saturating_sub(1))
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false)
    }

    /// Trainable leaf; holds a gradient after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    /// For ops that only move already-checked values.
    fn push_unchecked(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` fed into any ReLU on the tape. Finite-difference checks
    /// use it to avoid probing across a kink.
    pub fn min_relu_input_magnitude(&self) -> Option<F> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .map(|v| v.abs())
                    .reduce(F::min),
                _ => None,
            })
            .reduce(F::min)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of intermediate nodes are
    /// released once propagated; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(shape, F::one());
        accumulate(&mut self.grads[loss.0], seed);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = ops::backward(&self.nodes, i, &g)?;
            for (v, t) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.grads[v.0], t);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(slot: &mut Option<Tensor<F>>, t: Tensor<F>) {
    match slot {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), t.shape());
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += *v;
            }
        }
        None => *slot = Some(t),
    }
}
