//! Reverse-mode automatic differentiation over `ndarray` f64 tensors.
//!
//! A [`Tape`] is an append-only arena of nodes built during a forward pass.
//! Every op pushes one node holding its value and a closure that routes the
//! incoming gradient to its parents. [`Tape::backward`] walks the arena in
//! reverse creation order, so any composition of the ops here gets exact
//! gradients without per-module backward code.
//!
//! All values are `f64`; gradient-vs-finite-difference checks run at 64-bit
//! precision throughout the test suite.

mod conv;
mod ops;
mod params;
mod resample;
#[cfg(test)]
mod tests;

pub use conv::ConvGeometry;
pub use ops::one_hot;
pub use params::{kaiming_normal, trunc_normal, uniform_init, ParamId, ParamStore};

use ndarray::ArrayD;
use std::cell::RefCell;
use std::rc::Rc;

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    /// Set when this node is a leaf bound to a stored parameter:
    /// (store uid, parameter id).
    param: Option<(u64, ParamId)>,
    /// Whether a gradient can reach a parameter through this node.
    needs_grad: bool,
    backward: Option<BackFn>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradSink {
    /// Accumulate `g` into the gradient slot of node `idx`. Gradients are
    /// kept in standard layout so backward closures can reshape freely.
    pub fn add(&mut self, idx: usize, g: ArrayD<f64>) {
        match &mut self.grads[idx] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(to_standard(g)),
        }
    }
}

fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// The autodiff arena. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a tensor on a tape. Copyable; all ops live on this type.
#[derive(Clone, Copy)]
pub struct Tx<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A constant tensor: no gradient flows into it.
    pub fn constant(&self, value: ArrayD<f64>) -> Tx<'_> {
        let idx = self.push(Node {
            value: Rc::new(value),
            param: None,
            needs_grad: false,
            backward: None,
        });
        Tx { tape: self, idx }
    }

    /// A differentiable leaf that is not a stored parameter (used for inputs
    /// in gradient checks).
    pub fn var(&self, value: ArrayD<f64>) -> Tx<'_> {
        let idx = self.push(Node {
            value: Rc::new(value),
            param: None,
            needs_grad: true,
            backward: None,
        });
        Tx { tape: self, idx }
    }

    /// Bind a stored parameter as a leaf on this tape.
    pub fn param<'t>(&'t self, store: &ParamStore, id: ParamId) -> Tx<'t> {
        let idx = self.push(Node {
            value: store.value_rc(id),
            param: Some((store.uid(), id)),
            needs_grad: true,
            backward: None,
        });
        Tx { tape: self, idx }
    }

    pub(crate) fn push_op(
        &self,
        value: ArrayD<f64>,
        needs_grad: bool,
        backward: BackFn,
    ) -> Tx<'_> {
        let idx = self.push(Node {
            value: Rc::new(to_standard(value)),
            param: None,
            needs_grad,
            backward: if needs_grad { Some(backward) } else { None },
        });
        Tx { tape: self, idx }
    }

    /// Backpropagate from a scalar node. Returns per-node gradients.
    ///
    /// Panics if `loss` does not hold exactly one element.
    pub fn backward(&self, loss: Tx<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.idx].value.len(),
            1,
            "backward requires a scalar loss node"
        );
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        let seed = ArrayD::from_elem(nodes[loss.idx].value.raw_dim(), 1.0);
        sink.grads[loss.idx] = Some(seed);
        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                sink.grads[idx] = None;
                continue;
            }
            // Interior nodes consume their gradient; leaves keep theirs.
            if let Some(back) = &node.backward {
                if let Some(g) = sink.grads[idx].take() {
                    back(&g, &mut sink);
                }
            }
        }
        Grads { grads: sink.grads }
    }
}

/// Gradients produced by [`Tape::backward`]. Leaf gradients stay resident;
/// interior ones are consumed during the sweep.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient with respect to a leaf node, if any reached it.
    pub fn wrt(&self, x: Tx<'_>) -> Option<&ArrayD<f64>> {
        self.grads[x.idx].as_ref()
    }

    /// Sum gradients per parameter of `store` (a parameter may appear as
    /// several leaves on one tape; other stores' leaves are ignored).
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<(ParamId, ArrayD<f64>)> {
        let nodes = tape.nodes.borrow();
        let mut acc: std::collections::BTreeMap<ParamId, ArrayD<f64>> =
            std::collections::BTreeMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if let (Some((uid, pid)), Some(g)) = (node.param, self.grads[idx].as_ref()) {
                if uid != store.uid() {
                    continue;
                }
                match acc.get_mut(&pid) {
                    Some(total) => *total += g,
                    None => {
                        acc.insert(pid, g.clone());
                    }
                }
            }
        }
        acc.into_iter().collect()
    }
}

impl<'t> Tx<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn index(&self) -> usize {
        self.idx
    }

    /// The value of this node, behind a cheap shared handle (no RefCell
    /// guard is held, so it is safe to keep across further op calls).
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Alias of [`Tx::value`], kept for symmetry in op implementations.
    pub fn value_rc(&self) -> Rc<ArrayD<f64>> {
        self.value()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].needs_grad
    }

    /// Extract the single element of a scalar node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    /// Re-enter this value as a constant: gradient flow stops here.
    pub fn detach(&self) -> Tx<'t> {
        let value = self.value_rc();
        let idx = self.tape.push(Node {
            value,
            param: None,
            needs_grad: false,
            backward: None,
        });
        Tx {
            tape: self.tape,
            idx,
        }
    }
}
