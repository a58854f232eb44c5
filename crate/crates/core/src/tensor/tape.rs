use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values visible to a backward rule.
pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// Maps the output gradient to one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>, &[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<TensorId>,
    backward: Option<BackwardFn<T>>,
}

/// Linear record of tensor operations.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and the reverse pass simply walks the nodes backwards.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Appends an operation result. The backward rule is kept only when some
    /// input requires a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[TensorId],
        backward: BackwardFn<T>,
    ) -> TensorId {
        let tracked = inputs.iter().any(|&i| self.requires_grad(i));
        let node = if tracked {
            Node {
                value: value.with_requires_grad(true),
                inputs: inputs.to_vec(),
                backward: Some(backward),
            }
        } else {
            Node {
                value: value.with_requires_grad(false),
                inputs: Vec::new(),
                backward: None,
            }
        };
        self.nodes.push(node);
        TensorId(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.backward {
                Some(rule) => {
                    let ctx = BackwardCtx {
                        inputs: node.inputs.iter().map(|i| &self.nodes[i.0].value).collect(),
                        output: &node.value,
                        needs: node
                            .inputs
                            .iter()
                            .map(|i| self.nodes[i.0].value.requires_grad())
                            .collect(),
                    };
                    let input_grads = rule(&ctx, &g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[input.0].value.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), self.nodes[input.0].value.numel());
                        match &mut grads[input.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            slot => *slot = Some(ig),
                        }
                    }
                }
                None => {
                    if node.value.requires_grad() {
                        self.nodes[idx].value.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}
