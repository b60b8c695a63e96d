//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations on [`Var`]s that touch a tape-bound input append a node to that
//! tape; operations whose inputs are all constants run eagerly and record
//! nothing, so inference never retains intermediates. Node ids increase in
//! execution order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] walks it once in reverse.

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, InputCheck};

use crate::error::TensorError;
use crate::tensor::{Float, Tensor};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule: receives the gradient of the node output and, for each
/// input, whether that input needs a gradient.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    /// `None` marks an input that does not participate in the graph.
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct TapeCore<T> {
    nodes: RefCell<Vec<Node<T>>>,
    closed: Cell<bool>,
}

/// Append-only record of a forward computation.
pub struct Tape<T> {
    core: Rc<TapeCore<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            core: Rc::new(TapeCore {
                nodes: RefCell::new(Vec::new()),
                closed: Cell::new(false),
            }),
        }
    }

    /// Registers `value` as a gradient-requiring leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<T> {
        let mut nodes = self.core.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some(NodeRef {
                tape: Rc::clone(&self.core),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.core.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        self.core.closed.get()
    }

    /// Propagates d(loss)/d(node) back to every leaf. Closes the tape.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let node = loss.node.as_ref().ok_or(TensorError::NotOnTape)?;
        if !Rc::ptr_eq(&node.tape, &self.core) {
            return Err(TensorError::MixedTapes);
        }
        if loss.value.numel() != 1 {
            return Err(TensorError::NotScalar(loss.value.shape().to_vec()));
        }
        if self.core.closed.replace(true) {
            return Err(TensorError::TapeClosed);
        }
        let nodes = std::mem::take(&mut *self.core.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf = vec![false; nodes.len()];
        grads[node.id] = Some(Tensor::full(loss.value.shape(), T::one()));

        for (id, n) in nodes.into_iter().enumerate().take(node.id + 1).rev() {
            let Some(backward) = n.backward else {
                leaf[id] = true;
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = n.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), n.inputs.len());
            for (input, gi) in n.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(gi)) = (input, gi) {
                    accumulate(&mut grads[*i], gi);
                }
            }
        }
        for (g, is_leaf) in grads.iter_mut().zip(&leaf) {
            if !is_leaf {
                *g = None;
            }
        }
        Ok(Gradients {
            tape: Rc::downgrade(&self.core),
            grads,
        })
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

#[derive(Clone)]
struct NodeRef<T> {
    tape: Rc<TapeCore<T>>,
    id: usize,
}

/// A tensor value, optionally bound to a tape node.
#[derive(Clone)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<NodeRef<T>>,
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl<T: Float> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn constant_rc(value: Rc<Tensor<T>>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Self {
        Var {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    /// Records `out = op(inputs)` with the given backward rule.
    pub(crate) fn record(
        op: &'static str,
        inputs: &[&Var<T>],
        out: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<T>> {
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut tape: Option<&Rc<TapeCore<T>>> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match tape {
                    Some(t) if !Rc::ptr_eq(t, &n.tape) => return Err(TensorError::MixedTapes),
                    _ => tape = Some(&n.tape),
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var::constant(out));
        };
        if tape.closed.get() {
            return Err(TensorError::TapeClosed);
        }
        let tape = Rc::clone(tape);
        let id = {
            let mut nodes = tape.nodes.borrow_mut();
            let id = nodes.len();
            nodes.push(Node {
                inputs: inputs
                    .iter()
                    .map(|v| v.node.as_ref().map(|n| n.id))
                    .collect(),
                backward: Some(Box::new(backward)),
            });
            id
        };
        Ok(Var {
            value: Rc::new(out),
            node: Some(NodeRef { tape, id }),
        })
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    tape: std::rc::Weak<TapeCore<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> std::fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.grads.iter().filter(|g| g.is_some()).count();
        write!(f, "Gradients({n} leaves)")
    }
}

impl<T: Float> Gradients<T> {
    /// Gradient of `leaf`, or `None` when the loss does not depend on it.
    pub fn get(&self, leaf: &Var<T>) -> Option<&Tensor<T>> {
        let node = leaf.node.as_ref()?;
        let same = self
            .tape
            .upgrade()
            .is_some_and(|t| Rc::ptr_eq(&t, &node.tape));
        if !same {
            return None;
        }
        self.grads.get(node.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for unreached leaves.
    pub fn get_or_zeros(&self, leaf: &Var<T>) -> Tensor<T> {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let loss = x.sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.scale(3.0).unwrap().add(&x).unwrap();
        let g = tape.backward(&y.sum_all().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let loss = x.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.backward(&loss).unwrap_err(), TensorError::TapeClosed);
        assert_eq!(x.scale(2.0).unwrap_err(), TensorError::TapeClosed);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(&x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_record_nothing() {
        let tape = Tape::<f32>::new();
        let a = Var::constant(Tensor::full(&[4], 1.0));
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(tape.is_empty());
        assert!(matches!(
            tape.backward(&b.sum_all().unwrap()),
            Err(TensorError::NotOnTape)
        ));
    }

    #[test]
    fn mixed_tapes_are_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.leaf(Tensor::full(&[2], 1.0));
        let b = t2.leaf(Tensor::full(&[2], 1.0));
        assert_eq!(a.add(&b).unwrap_err(), TensorError::MixedTapes);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[2], 1.0));
        let unused = tape.leaf(Tensor::<f64>::full(&[2], 1.0));
        let g = tape.backward(&x.sum_all().unwrap()).unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.get_or_zeros(&unused).data(), &[0.0, 0.0]);
    }
}
