//! Minimal reverse-mode tape over `ndarray` values.
//!
//! A [`Graph`] records one forward pass: every operation pushes a node
//! holding its output value and a closure that maps the node's output
//! gradient to gradient contributions for its inputs. [`Graph::backward`]
//! then walks the nodes once in reverse id order. Ids are monotonically
//! increasing, so reverse id order is already a topological order and no
//! explicit dependency tracking is needed.
//!
//! Nodes whose inputs are all gradient-free (constants, frozen parameters)
//! are pushed without a closure, and the backward walk skips the gradient
//! math for such inputs entirely. A graph created with
//! [`Graph::new_inference`] records no closures at all.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use ndarray::ArrayD;

/// Handle to a value on the tape. Cheap to copy; only meaningful together
/// with the [`Graph`] that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var {
    pub(crate) id: usize,
}

/// Receives gradient contributions for the inputs of one node.
pub struct GradSink<'a> {
    slots: &'a mut [Option<ArrayD<f32>>],
    needs: &'a [bool],
}

impl GradSink<'_> {
    /// True if `v` wants a gradient; lets backward closures skip work.
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.id]
    }

    /// Adds `g` to the gradient accumulator of `v`.
    pub fn add(&mut self, v: Var, g: ArrayD<f32>) {
        if !self.needs[v.id] {
            return;
        }
        match &mut self.slots[v.id] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch");
                *acc += &g;
            }
            slot @ None => *slot = Some(g),
        }
    }
}

type BackwardFn = Box<dyn Fn(&ArrayD<f32>, &mut GradSink)>;

struct Node {
    value: Rc<ArrayD<f32>>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Tape for one forward pass (or several sharing parameters, e.g. a batch).
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that stores values but no backward closures. Use for
    /// prediction, where the tape is only a convenient evaluation order.
    pub fn new_inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pushes a node. `backward` is dropped when the graph is not recording
    /// or when no input needs a gradient.
    pub(crate) fn push(
        &self,
        value: ArrayD<f32>,
        needs_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.push_rc(Rc::new(value), needs_grad, backward)
    }

    pub(crate) fn push_rc(
        &self,
        value: Rc<ArrayD<f32>>,
        needs_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let keep = self.recording && needs_grad;
        nodes.push(Node {
            value,
            needs_grad: keep,
            backward: if keep { backward } else { None },
        });
        Var {
            id: nodes.len() - 1,
        }
    }

    /// A value with no gradient.
    pub fn constant(&self, value: ArrayD<f32>) -> Var {
        self.push(value, false, None)
    }

    /// A gradient leaf (parameter or input under test). The value is shared,
    /// not copied.
    pub fn leaf(&self, value: Rc<ArrayD<f32>>, needs_grad: bool) -> Var {
        self.push_rc(value, needs_grad, None)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f32>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].needs_grad
    }

    /// Reverse pass from a scalar root. Gradients of interior nodes are
    /// freed as soon as they have been consumed; leaves keep theirs.
    pub fn backward(&self, root: Var) -> Grads {
        self.run_backward(root, false)
    }

    /// Like [`Graph::backward`] but keeps every node's gradient, for tests
    /// that inspect intermediates.
    pub fn backward_retaining(&self, root: Var) -> Grads {
        self.run_backward(root, true)
    }

    fn run_backward(&self, root: Var, retain: bool) -> Grads {
        assert!(self.recording, "backward on an inference graph");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        // A root that reaches no gradient leaf (e.g. every parameter frozen)
        // has nothing to differentiate; the gradient set is simply empty.
        if !nodes[root.id].needs_grad {
            return Grads { slots: Vec::new() };
        }

        let n = root.id + 1;
        let needs: Vec<bool> = nodes.iter().take(n).map(|nd| nd.needs_grad).collect();
        let mut slots: Vec<Option<ArrayD<f32>>> = Vec::new();
        slots.resize_with(n, || None);
        slots[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));

        for id in (0..n).rev() {
            let Some(grad) = slots[id].take() else {
                continue;
            };
            match &nodes[id].backward {
                Some(cb) => {
                    {
                        let mut sink = GradSink {
                            slots: &mut slots,
                            needs: &needs,
                        };
                        cb(&grad, &mut sink);
                    }
                    if retain {
                        slots[id] = Some(grad);
                    }
                }
                // Leaf (or closure-free node): keep the accumulated gradient
                // so the caller can read it out.
                None => slots[id] = Some(grad),
            }
        }

        Grads { slots }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Grads {
    slots: Vec<Option<ArrayD<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.slots.get(v.id).and_then(|s| s.as_ref())
    }

    /// Removes and returns the gradient of `v`, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<f32>> {
        self.slots.get_mut(v.id).and_then(|s| s.take())
    }
}
