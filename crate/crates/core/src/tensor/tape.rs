use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Reverse-mode rule of a recorded operation.
///
/// Implementors capture whatever forward values they need when the node
/// is recorded. `backward` receives the gradient of the loss with respect
/// to the node's output and returns one entry per input, in input order;
/// entries for inputs with `needs[i] == false` may be `None`.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(&self, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    inputs: Vec<Option<usize>>,
    op: Option<Box<dyn Backward>>,
    shape: Vec<usize>,
    leaf: bool,
}

/// Append-only record of differentiable operations.
///
/// Node ids are assigned in creation order, which is a topological order
/// of the computation graph, so the backward pass is a single reverse
/// sweep. A tape built with [`Tape::inference`] records nothing: values are
/// computed and dropped as soon as their `Var`s go out of scope.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tracking: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("tracking", &self.tracking)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            tracking: true,
        }
    }

    /// A tape that never records; for forward-only evaluation.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: its gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.tracking.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: Vec::new(),
                op: None,
                shape: value.shape().to_vec(),
                leaf: true,
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            id,
            value: Rc::new(value),
        }
    }

    /// A value that takes no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    /// Records an operation whose output is `value`.
    ///
    /// `rule` is only invoked when at least one input is tracked, so
    /// forward-only evaluation never pays for saving activations.
    pub fn record<'t, B, F>(&'t self, inputs: &[&Var<'t>], value: Tensor, rule: F) -> Result<Var<'t>>
    where
        B: Backward + 'static,
        F: FnOnce() -> B,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: std::any::type_name::<B>()
                    .rsplit("::")
                    .next()
                    .unwrap_or("op"),
            });
        }
        let tracked = self.tracking && inputs.iter().any(|v| v.id.is_some());
        let id = tracked.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op: Some(Box::new(rule())),
                shape: value.shape().to_vec(),
                leaf: false,
            });
            nodes.len() - 1
        });
        Ok(Var {
            tape: self,
            id,
            value: Rc::new(value),
        })
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Each node on the path to `loss` is visited once, in reverse creation
    /// order. Saved activations are released as the sweep passes them, so
    /// a tape supports a single backward pass.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let mut visited = 0;
        let Some(root) = loss.id else {
            return Ok(Gradients { grads, visited });
        };
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), 1.0));

        for id in (0..=root).rev() {
            let node = &mut nodes[id];
            if node.leaf {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                node.op = None;
                continue;
            };
            let Some(op) = node.op.take() else {
                return Err(Error::Contract(format!(
                    "node {id} was already consumed by an earlier backward pass"
                )));
            };
            visited += 1;
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = op.backward(&grad, &needs)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            let inputs = node.inputs.clone();
            for (input, g) in inputs.into_iter().zip(input_grads) {
                let (Some(input), Some(g)) = (input, g) else {
                    continue;
                };
                if g.shape() != nodes[input].shape.as_slice() {
                    return Err(Error::shape(op.name(), &nodes[input].shape, g.shape()));
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

/// Handle to a value computed on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    pub(super) tape: &'t Tape,
    pub(super) id: Option<usize>,
    pub(super) value: Rc<Tensor>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn node_id(&self) -> Option<usize> {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Shared handle to the value, for saving in a [`Backward`] rule.
    pub fn saved(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, leaf: &Var<'_>) -> Option<&Tensor> {
        leaf.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, leaf: &Var<'_>) -> Option<Tensor> {
        leaf.id.and_then(|id| self.grads.get_mut(id)?.take())
    }

    /// Number of operation nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}
