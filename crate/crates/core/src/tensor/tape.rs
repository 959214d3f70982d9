use super::ops::{self, Op};
use super::{Data, Tensor, C64};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// A tape is confined to one thread. Independent tapes can be evaluated in
/// parallel and their [`Gradients`] summed afterwards.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of a real scalar with respect to the leaves of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `dloss/d·` from a real scalar back to every leaf that
    /// requires a gradient, in exact reverse execution order. The tape is
    /// cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        if !root.is_real() {
            return Err(Error::Contract(
                "backward needs a real loss, got a complex scalar".into(),
            ));
        }

        let n = self.nodes.len();
        let mut adj: Vec<Option<Data>> = vec![None; n];
        adj[loss.0] = Some(Data::Real(vec![1.0]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            let contributions = ops::backward(&self.nodes, i, &g)?;
            for (input, grad) in contributions {
                accumulate(&self.nodes, &mut adj, input, grad);
            }
        }

        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(a, node)| match (&node.op, a) {
                (Op::Leaf, Some(d)) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data: d,
                }),
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads })
    }
}

/// Adds `grad` into the adjoint of node `idx`, coercing it to the node's
/// kind. A real node receiving a complex adjoint keeps the real part, which
/// is the derivative along its only (real) direction.
fn accumulate(nodes: &[Node], adj: &mut [Option<Data>], idx: usize, grad: Data) {
    let node = &nodes[idx];
    if !node.requires_grad {
        return;
    }
    let grad = match (node.value.is_real(), grad) {
        (true, Data::Complex(v)) => Data::Real(v.into_iter().map(|z| z.re).collect()),
        (false, Data::Real(v)) => Data::Complex(v.into_iter().map(|x| C64::new(x, 0.0)).collect()),
        (_, g) => g,
    };
    match &mut adj[idx] {
        slot @ None => *slot = Some(grad),
        Some(existing) => match (existing, grad) {
            (Data::Real(a), Data::Real(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (Data::Complex(a), Data::Complex(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y)
            }
            _ => unreachable!("adjoint kinds are coerced above"),
        },
    }
}
