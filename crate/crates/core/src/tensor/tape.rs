//! Recording tape for reverse-mode differentiation.
//!
//! The tape doubles as an arena: forward values live in it, and an op is only
//! recorded when one of its inputs is tracked. Running a forward pass over
//! untracked leaves therefore costs the kernels alone and produces bit-
//! identical values to a tracked pass.

use super::ops::{self, Op};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node {
    value: Tensor,
    /// Gradient flows through this node.
    tracked: bool,
    /// Recorded primitive that produced this node, if any.
    source: Option<(Op, Vec<TensorId>)>,
}

/// An append-only graph of primitive applications, in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Inserts a leaf tensor. It participates in differentiation iff it was
    /// marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let tracked = value.requires_grad();
        self.push(Node {
            value,
            tracked,
            source: None,
        })
    }

    /// Applies a primitive to tensors already on the tape.
    pub fn apply(&mut self, op: Op, inputs: &[TensorId]) -> Result<TensorId> {
        let refs: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = ops::forward(&op, &refs)?;
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        let source = tracked.then(|| (op, inputs.to_vec()));
        Ok(self.push(Node {
            value,
            tracked,
            source,
        }))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar root. Consumes the tape and returns every
    /// tensor, with gradients filled in on tracked leaves.
    pub fn backward(mut self, root: TensorId) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.tracked {
            return Err(Error::UntrackedRoot);
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some((op, inputs)) = self.nodes[i].source.clone() else {
                continue;
            };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            // Allocate sinks for tracked inputs.
            for id in &inputs {
                if self.nodes[id.0].tracked && grads[id.0].is_none() {
                    grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
                }
            }
            let in_refs: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let output = &self.nodes[i].value;
            // Pull the sink buffers out to satisfy the borrow checker; ids
            // can repeat (x * x), in which case the repeat gets a scratch
            // buffer that is folded back in afterwards.
            let mut taken: Vec<usize> = Vec::new();
            let mut bufs: Vec<Option<Vec<f32>>> = Vec::with_capacity(inputs.len());
            for id in &inputs {
                if !self.nodes[id.0].tracked {
                    bufs.push(None);
                } else if taken.contains(&id.0) {
                    bufs.push(Some(vec![0.0; self.nodes[id.0].value.numel()]));
                } else {
                    taken.push(id.0);
                    bufs.push(grads[id.0].take());
                }
            }
            {
                let mut sinks: Vec<Option<&mut Vec<f32>>> =
                    bufs.iter_mut().map(|b| b.as_mut()).collect();
                ops::backward(&op, &in_refs, output, &gout, &mut sinks);
            }
            for (slot, id) in bufs.into_iter().zip(&inputs) {
                let Some(buf) = slot else { continue };
                match grads[id.0].as_mut() {
                    None => grads[id.0] = Some(buf),
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(&buf) {
                            *e += v;
                        }
                    }
                }
            }
        }

        // Attach gradients to the leaves that asked for them.
        for (node, grad) in self.nodes.iter_mut().zip(grads.into_iter()) {
            if node.value.requires_grad() {
                node.value
                    .set_grad(grad.unwrap_or_else(|| vec![0.0; node.value.numel()]));
            }
        }
        Ok(Gradients {
            tensors: self.nodes.into_iter().map(|n| n.value).collect(),
        })
    }

    fn push(&mut self, node: Node) -> TensorId {
        self.nodes.push(node);
        TensorId(self.nodes.len() - 1)
    }
}

/// Result of a backward pass: every tape tensor, gradients attached.
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Gradient buffer of a tracked leaf.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.tensors[id.0].grad()
    }

    pub fn take(mut self, id: TensorId) -> Tensor {
        self.tensors.swap_remove(id.0)
    }
}
