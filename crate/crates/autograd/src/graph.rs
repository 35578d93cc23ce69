use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::{Array, ParamId, ParamStore};

/// Propagates the gradient of one node to its inputs.
pub(crate) type BackFn = Box<dyn Fn(&Array, &mut GradSink<'_>)>;

struct Node {
    value: Arc<Array>,
    back: Option<BackFn>,
    needs_grad: bool,
}

/// Receives gradient contributions during the backward sweep.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Array>],
    needs: &'a [bool],
}

impl GradSink<'_> {
    #[inline]
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Adds the contribution produced by `f` when node `id` needs a gradient.
    pub(crate) fn add_with(&mut self, id: usize, f: impl FnOnce() -> Array) {
        if !self.needs[id] {
            return;
        }
        let g = f();
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Tape of operations for one forward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

/// Node handle on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph<'g>,
    pub(crate) id: usize,
}

impl<'s> Graph<'s> {
    /// Graph that records backward closures.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_grad(store, true)
    }

    /// Graph that only evaluates values.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::with_grad(store, false)
    }

    fn with_grad(store: &'s ParamStore, grad_enabled: bool) -> Self {
        Self {
            store,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Non-differentiable input.
    pub fn constant<'g>(&'g self, value: Array) -> Var<'g> {
        self.push_leaf(Arc::new(value), false)
    }

    /// Differentiable input that is not a stored parameter (used by tests and
    /// gradient checks with respect to inputs).
    pub fn input<'g>(&'g self, value: Array) -> Var<'g> {
        let needs = self.grad_enabled;
        self.push_leaf(Arc::new(value), needs)
    }

    /// Leaf node for a stored parameter; repeated lookups share one node.
    pub fn param<'g>(&'g self, id: ParamId) -> Var<'g> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push_leaf(self.store.get_rc(id), self.grad_enabled);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn push_leaf<'g>(&'g self, value: Arc<Array>, needs_grad: bool) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            back: None,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a derived node. `back` is kept only when some input needs a
    /// gradient.
    pub(crate) fn push<'g>(&'g self, value: Array, inputs: &[usize], back: impl Fn(&Array, &mut GradSink<'_>) + 'static) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.grad_enabled && inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value: Arc::new(value),
            back: if needs_grad { Some(Box::new(back)) } else { None },
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Array> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// needs one.
    pub fn backward(&self, output: Var<'_>) -> Grads {
        assert!(
            std::ptr::eq(output.graph as *const Graph<'_> as *const u8, self as *const Graph<'_> as *const u8),
            "backward called with a variable from another graph"
        );
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.id].value;
        assert_eq!(out_val.len(), 1, "backward requires a scalar output, got {:?}", out_val.shape());
        let needs: Vec<bool> = nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        if needs[output.id] {
            grads[output.id] = Some(Array::full(out_val.shape(), 1.0));
        }
        for id in (0..=output.id).rev() {
            let Some(back) = nodes[id].back.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                needs: &needs,
            };
            back(&g, &mut sink);
            grads[id] = Some(g);
        }
        let params = self.params.borrow();
        let by_param = params
            .iter()
            .filter_map(|(&pid, &node)| grads[node].take().map(|g| (pid, g)))
            .collect();
        Grads {
            by_param,
            by_node: grads,
        }
    }
}

impl fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph<'g> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to this node's value.
    pub fn value(&self) -> Arc<Array> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.needs_grad(self.id)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

/// Result of [`Graph::backward`].
pub struct Grads {
    by_param: HashMap<ParamId, Array>,
    by_node: Vec<Option<Array>>,
}

impl Grads {
    /// Gradient for a parameter, `None` when it did not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.by_param.get(&id)
    }

    /// Gradient with respect to any node of the graph (inputs included).
    pub fn wrt(&self, var: Var<'_>) -> Option<&Array> {
        self.by_node.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    /// Moves the parameter gradients out, dropping intermediate gradients.
    pub fn into_param_grads(self) -> HashMap<ParamId, Array> {
        self.by_param
    }
}
