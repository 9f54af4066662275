//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, which is already a topological order, so the backward
//! sweep just walks the node list in reverse. A graph is built per forward
//! pass and dropped afterwards; it is confined to one thread.

mod conv;
mod elementwise;
mod matmul;
mod reduce;
mod shape;
mod warp;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub use conv::{conv_output_len, FilterAxis, PaddingMode};
pub use warp::{SampleDirection, WarpOutput};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Recording of one forward pass.
pub struct Graph<'p> {
    nodes: RefCell<Vec<Node>>,
    params: Option<&'p ParamStore>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: None,
            param_vars: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph whose [`Graph::param`] leaves come from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Evaluation-only graph: no backward closures are recorded.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: Real) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// shared weights accumulate one total gradient.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("Graph::param called on a graph built without a ParamStore");
        let v = self.leaf(store.value(id).clone(), true);
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant((*t).clone())
    }

    /// Appends an operation result. `backward` receives the gradient of the
    /// output and scatters contributions into the sink.
    pub(crate) fn push<F>(&self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &mut GradSink) + 'static,
    {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|&v| !self.value(v).all_finite()),
            "operation produced non-finite values from finite inputs"
        );
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if loss_shape != [1, 1, 1, 1] {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_shape),
            ));
        }
        let shapes: Vec<Shape> = nodes.iter().map(|n| n.value.shape()).collect();
        let wants: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if wants[loss.0] {
            grads[loss.0] = Some(Tensor::ones(loss_shape));
        }
        for i in (0..=loss.0).rev() {
            let Some(backward) = nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                shapes: &shapes,
                wants: &wants,
            };
            backward(&g, &mut sink);
        }
        Ok(Gradients {
            grads,
            shapes,
            wants,
            param_vars: self.param_vars.borrow().clone(),
        })
    }
}

/// Gradient accumulator handed to backward closures.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
    shapes: &'a [Shape],
    wants: &'a [bool],
}

impl GradSink<'_> {
    #[inline]
    pub fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    /// Zero-initialized (on first use) gradient buffer of `v`.
    pub fn slot(&mut self, v: Var) -> &mut Tensor {
        let shape = self.shapes[v.0];
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    /// Adds a full gradient contribution to `v`.
    pub fn add(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shapes[v.0]);
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
    wants: Vec<bool>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Total derivative of the loss with respect to leaf `v`; zeros when the
    /// loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) if self.wants[v.0] => g.clone(),
            _ => Tensor::zeros(self.shapes[v.0]),
        }
    }

    /// Gradient for a stored parameter, or `None` if it was never used.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.param_vars.get(&id).map(|&v| self.wrt(v))
    }
}
