//! Reverse-mode differentiation tape.
//!
//! Every differentiable value in the pipeline is a [`Var`]: a node on a
//! [`Tape`] holding an n-dimensional `f64` array. Operations append nodes in
//! topological order; [`backward`] sweeps the tape in reverse, accumulating
//! gradients into every node so callers can query the gradient of any leaf.

use ndarray::ArrayD;
use std::cell::RefCell;
use std::rc::Rc;

/// Backward closure: receives the output gradient, returns one gradient per
/// parent, in the same order the parents were registered.
type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    parents: Vec<usize>,
    back: Option<BackFn>,
}

/// Append-only graph of differentiable operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape {
            nodes: RefCell::new(Vec::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A tracked value on a tape. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    id: usize,
    value: Rc<ArrayD<f64>>,
}

impl Var {
    /// Creates a leaf (no parents). Gradients accumulate into it during the
    /// backward sweep and can be read back through [`Gradients::get`].
    pub fn leaf(tape: &Rc<Tape>, value: ArrayD<f64>) -> Var {
        Var::from_parts(tape, value, Vec::new(), None)
    }

    /// Internal node constructor used by the op library.
    pub(crate) fn from_op(
        tape: &Rc<Tape>,
        value: ArrayD<f64>,
        parents: Vec<&Var>,
        back: BackFn,
    ) -> Var {
        let ids = parents.iter().map(|p| p.id).collect();
        Var::from_parts(tape, value, ids, Some(back))
    }

    fn from_parts(
        tape: &Rc<Tape>,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        back: Option<BackFn>,
    ) -> Var {
        let mut nodes = tape.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents, back });
        Var {
            tape: Rc::clone(tape),
            id,
            value: Rc::new(value),
        }
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    /// Shared handle to the underlying array, for backward closures.
    pub(crate) fn value_rc(&self) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.value)
    }

    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Extracts a scalar; panics if the value is not a single element.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "scalar() on non-scalar Var");
        *self.value.iter().next().unwrap()
    }
}

/// Gradients for every node of a tape after one backward sweep.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Reverse sweep from a scalar root. Nodes appended after the root are
/// ignored; nodes not on a path to the root receive no gradient.
pub fn backward(root: &Var) -> Gradients {
    assert_eq!(root.value.len(), 1, "backward() requires a scalar root");
    let nodes = root.tape.nodes.borrow();
    let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(nodes.len());
    grads.resize_with(nodes.len(), || None);
    grads[root.id] = Some(ArrayD::from_elem(root.value.raw_dim(), 1.0));

    for id in (0..=root.id).rev() {
        let Some(gout) = grads[id].take() else {
            continue;
        };
        let node = &nodes[id];
        if let Some(back) = &node.back {
            let pgrads = back(&gout);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(pgrads) {
                debug_assert!(*pid < id, "tape order violated");
                match &mut grads[*pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        grads[id] = Some(gout);
    }
    Gradients { grads }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn leaf_roundtrip() {
        let tape = Tape::new();
        let v = Var::leaf(&tape, arr1(&[1.0, 2.0]).into_dyn());
        assert_eq!(v.shape(), &[2]);
        assert_eq!(v.value()[[1]], 2.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let v = Var::leaf(&tape, arr1(&[3.0, -1.0, 4.0]).into_dyn());
        let s = crate::tensor::ops::sum_all(&v);
        assert_eq!(s.scalar(), 6.0);
        let grads = backward(&s);
        let g = grads.get(&v).unwrap();
        assert!(g.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let tape = Tape::new();
        let v = Var::leaf(&tape, arr1(&[2.0]).into_dyn());
        let a = crate::tensor::ops::scale(&v, 3.0);
        let b = crate::tensor::ops::scale(&v, 5.0);
        let s = crate::tensor::ops::sum_all(&crate::tensor::ops::add(&a, &b));
        let grads = backward(&s);
        assert_eq!(grads.get(&v).unwrap()[[0]], 8.0);
    }
}
