use std::sync::Arc;

use crate::{Error, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure of a recorded operation.
///
/// Receives read access to every recorded value, the operation's own output,
/// the upstream gradient of that output, and the gradient store into which
/// it accumulates contributions for its inputs.
pub type BackwardFn = Box<dyn Fn(&Values<'_>, &Tensor, &[f64], &mut Grads)>;

struct Node {
    op: &'static str,
    value: Arc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Define-by-run tape. Nodes are appended in execution order, so the
/// record is topologically sorted by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Read-only view of the recorded values handed to backward closures.
pub struct Values<'a>(&'a [Node]);

impl Values<'_> {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.0[v.0].value
    }
}

/// Gradient buffers, one per node that requires a gradient. Buffers are
/// allocated lazily on first accumulation.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    needed: Vec<bool>,
}

impl Grads {
    /// Mutable gradient buffer of `v`, or `None` if `v` does not take part
    /// in differentiation.
    pub fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.needed[v.0] {
            return None;
        }
        let size = self.sizes[v.0];
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; size]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.needed[v.0]
    }

    /// Accumulated gradient of `v`; `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    /// Gradient of `v` as a vector, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.bufs.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, op: &'static str, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf sharing storage with a parameter tensor.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf("param", value, true)
    }

    /// Differentiable leaf owning its value.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf("input", Arc::new(value), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf("constant", Arc::new(value), false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf("constant", value, false)
    }

    /// Records an operation. The backward closure is kept only when at least
    /// one parent requires a gradient.
    pub fn push_op(&mut self, op: &'static str, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a one-element output. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads = Grads {
            bufs: vec![None; self.nodes.len()],
            sizes: self.nodes.iter().map(|n| n.value.numel()).collect(),
            needed: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads.bufs[loss.0] = Some(vec![1.0]);
        let values = Values(&self.nodes);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(gout) = grads.bufs[id].take() else {
                continue;
            };
            backward(&values, &node.value, &gout, &mut grads);
            grads.bufs[id] = Some(gout);
        }
        Ok(grads)
    }

    /// First recorded node (in execution order) holding a NaN or infinity,
    /// with its operation name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op))
    }
}
