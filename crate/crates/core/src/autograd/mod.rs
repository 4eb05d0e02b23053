//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s together with a
//! closure that maps the output gradient to input gradients. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order. Discrete selections (argmin/argmax, binning, gathers
//! by integer index, OHEM masks) are constants of the closures and carry no
//! gradient.

mod ops;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) use ops::softmax_backward_rows;
pub use ops::BatchStats;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identity of a [`Parameter`]; stable across clones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

/// A learnable (or buffered) tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f32> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Buffers such as normalization running statistics are stored as
    /// non-trainable parameters so they are checkpointed alongside weights.
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.dims().to_vec()).expect("dims already validated");
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    /// Replaces the value, keeping dims consistent with the gradient.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if !value.same_dims(&self.value) {
            return Err(Error::shape(
                "parameter",
                format!(
                    "cannot replace {:?} with {:?}",
                    self.value.dims(),
                    value.dims()
                ),
            ));
        }
        self.value = value;
        Ok(())
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Selects batch-statistics or running-statistics behavior of
/// normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
        })
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            requires_grad: true,
            backward: None,
        })
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice
    /// returns the same leaf.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let v = self.push(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            requires_grad: p.trainable,
            backward: None,
        });
        self.params.insert(p.id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. `backward` receives the output gradient and a
    /// mask of which inputs need a gradient, and returns one entry per
    /// input.
    pub(crate) fn record(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs,
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let dims = self.value(loss).dims().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(dims));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(dims)?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = backward(&g, &need)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((input, grad), needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                let Some(grad) = grad else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(grad.dims(), self.nodes[input.0].value.dims());
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => acc.add(&grad)?,
                    None => grad,
                });
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf, `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn of_param(&self, p: &Parameter<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id()).and_then(|&v| self.wrt(v))
    }

    /// Adds this pass's gradient into `p.grad`.
    pub fn accumulate(&self, p: &mut Parameter<T>) -> Result<()> {
        if let Some(g) = self.of_param(p) {
            p.grad = p.grad.add(g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_exact() {
        // loss = sum(W x) with W: 2x3, x: 3x1 -> dL/dW[i][j] = x[j]
        let w = Parameter::new(
            Tensor::<f64>::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.25, -0.75]).unwrap(),
        );
        let x = Tensor::<f64>::new(vec![3, 1], vec![1.5, -2.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&w);
        let xv = g.constant(x);
        let y = g.matmul(wv, xv).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.of_param(&w).unwrap().data(),
            &[1.5, -2.0, 4.0, 1.5, -2.0, 4.0]
        );
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let z = Tensor::<f64>::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let mut g = Graph::new();
        let zv = g.variable(z);
        let s = g.softmax_row(zv).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(zv).unwrap().data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let v = g.variable(Tensor::zeros(vec![2, 2]).unwrap());
        assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(vec![1], vec![3.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }
}
