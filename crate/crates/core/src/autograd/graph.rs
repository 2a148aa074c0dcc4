use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::nn::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Maps (upstream gradient, input values, output value) to one gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode tape. Ops append nodes; [`Graph::backward`] walks them in reverse.
///
/// Every op method takes `&self`, so expressions can nest freely.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: Vec<Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: Vec::new(),
        }
    }

    /// Binds every parameter of `params` as a leaf. Frozen parameters and all
    /// parameters when `train` is false are recorded as constants.
    pub fn with_params(params: &ParamSet, train: bool) -> Self {
        let mut g = Self::new();
        let vars = params
            .iter()
            .map(|(_, p)| g.leaf(p.value.clone(), train && p.trainable))
            .collect();
        g.params = vars;
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an op output. The backward closure is dropped when no input
    /// needs a gradient.
    pub(crate) fn push(
        &self,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        let node = Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        };
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let seed_shape = nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let input_values: Vec<Rc<Tensor>> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].value.clone())
                .collect();
            let input_grads = backward(&grad, &input_values, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[inp].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[inp].value.shape(),
                    "grad shape for node {inp}"
                );
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// One gradient per parameter, in [`ParamSet`] order.
    pub fn param_grads(&self, g: &Graph, params: &ParamSet) -> Vec<Tensor> {
        params
            .iter()
            .zip(g.param_vars())
            .map(|((_, p), &v)| self.get_or_zeros(v, p.value.shape()))
            .collect()
    }
}
