use std::cell::RefCell;

use super::{numel, shape_err, Element, Result, Tensor};

/// Maps the output gradient onto each parent; `needs[i]` is false for
/// parents that do not require a gradient, which may then be skipped.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>>>;

struct Node<E: Element> {
    value: Tensor<E>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<E>>,
    param: Option<String>,
}

/// Recording of one forward pass.
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element = f32> {
    pub(crate) tape: &'t Tape<E>,
    pub(crate) id: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(Node { value, parents: vec![], requires_grad: false, backward: None, param: None })
    }

    /// A leaf that receives a gradient, without parameter bookkeeping.
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(Node { value, parents: vec![], requires_grad: true, backward: None, param: None })
    }

    pub(crate) fn param_leaf(&self, name: &str, value: Tensor<E>, trainable: bool) -> Var<'_, E> {
        self.push(Node {
            value,
            parents: vec![],
            requires_grad: trainable,
            backward: None,
            param: trainable.then(|| name.to_string()),
        })
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<E>,
        parents: &[Var<'t, E>],
        backward: impl Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Var<'t, E> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<E>),
            param: None,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<E> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id];
        if out.value.len() != 1 {
            return shape_err("backward", format!("loss must hold one value, got {:?}", out.value.shape()));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![E::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len(), "gradient size for node {}", p);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.param.as_ref().map(|name| (name.clone(), id)))
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, params })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a leaf; zeros if the loss does not depend on it.
    pub fn of(&self, var: Var<'_, E>) -> Tensor<E> {
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(self.shapes[var.id].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[var.id].clone()),
        }
    }

    /// `(parameter name, gradient)` for every trainable parameter binding.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&[E]>)> {
        self.params.iter().map(move |(name, id)| (name.as_str(), self.grads[*id].as_deref()))
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn value(&self) -> Tensor<E> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, E> {
        self.tape.constant(self.value())
    }
}
