//! Wengert-list tape: operations append nodes in topological order during the
//! forward pass; [`backward`] replays them once in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{Result, Scalar, Tensor, TensorError};

/// Gradient contribution sink used while walking the tape backwards.
pub(crate) struct GradBuf<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradBuf<T> {
    fn new(n: usize) -> Self {
        Self {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    /// Add `grad` into the slot for node `id`, allocating on first touch.
    pub(crate) fn accumulate(&mut self, id: usize, grad: Vec<T>) {
        match &mut self.slots[id] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), grad.len());
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a = *a + g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradBuf<T>)>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    backward: Option<BackwardFn<T>>, // None for leaves
    is_leaf: bool,
}

pub(crate) struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Handle tying a tensor to the tape node that produced it.
#[derive(Clone)]
pub(crate) struct NodeRef<T: Scalar> {
    pub(crate) tape: Rc<RefCell<TapeInner<T>>>,
    pub(crate) id: usize,
}

/// Explicit, single-use gradient tape. Create one per training step, watch
/// the trainable parameters, run the forward pass, then call
/// [`Tensor::backward`] on the scalar loss.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Register `t` as a leaf the backward pass will produce a gradient for.
    pub fn watch(&self, t: &mut Tensor<T>) {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(!inner.consumed, "watch on a consumed tape");
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: t.shape().to_vec(),
            backward: None,
            is_leaf: true,
        });
        drop(inner);
        t.set_tracked(
            NodeRef {
                tape: self.inner.clone(),
                id,
            },
            true,
        );
    }

    /// Watch a fresh copy of `t`, leaving the original untouched.
    pub fn var(&self, t: &Tensor<T>) -> Tensor<T> {
        let mut v = t.detached();
        self.watch(&mut v);
        v
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

/// Resolve the single tape shared by the tracked operands, erroring on a mix
/// of tapes or a tape already consumed by backward.
pub(crate) fn joint_tape<T: Scalar>(
    inputs: &[&Tensor<T>],
) -> Result<Option<Rc<RefCell<TapeInner<T>>>>> {
    let mut found: Option<Rc<RefCell<TapeInner<T>>>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match &found {
                Some(existing) => {
                    if !Rc::ptr_eq(existing, &node.tape) {
                        return Err(TensorError::TapeMismatch);
                    }
                }
                None => found = Some(node.tape.clone()),
            }
        }
    }
    if let Some(tape) = &found {
        if tape.borrow().consumed {
            return Err(TensorError::TapeConsumed);
        }
    }
    Ok(found)
}

/// Append an op node and return the handle for its output tensor.
pub(crate) fn push_node<T: Scalar>(
    tape: &Rc<RefCell<TapeInner<T>>>,
    shape: Vec<usize>,
    backward: BackwardFn<T>,
) -> NodeRef<T> {
    let mut inner = tape.borrow_mut();
    let id = inner.nodes.len();
    inner.nodes.push(Node {
        shape,
        backward: Some(backward),
        is_leaf: false,
    });
    NodeRef {
        tape: tape.clone(),
        id,
    }
}

/// Gradients keyed by watched parameter, as returned by [`Tensor::backward`].
pub struct Gradients<T: Scalar> {
    tape_ptr: *const RefCell<TapeInner<T>>,
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a watched tensor, if it participated in the loss.
    pub fn get(&self, param: &Tensor<T>) -> Option<&Tensor<T>> {
        let node = param.node.as_ref()?;
        if Rc::as_ptr(&node.tape) != self.tape_ptr {
            return None;
        }
        self.by_node.get(&node.id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Reverse-mode gradients of this scalar with respect to every watched
    /// leaf. Consumes the tape: a second call, or any further op recorded on
    /// it, is an error.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let node = self.node.as_ref().ok_or(TensorError::DetachedLoss)?;
        let tape = node.tape.clone();
        {
            let mut inner = tape.borrow_mut();
            if inner.consumed {
                return Err(TensorError::TapeConsumed);
            }
            inner.consumed = true;
        }
        let inner = tape.borrow();
        let mut buf = GradBuf::new(inner.nodes.len());
        buf.accumulate(node.id, vec![T::one()]);
        for id in (0..=node.id).rev() {
            let Some(grad) = buf.slots[id].take() else {
                continue;
            };
            match &inner.nodes[id].backward {
                Some(back) => back(&grad, &mut buf),
                None => buf.slots[id] = Some(grad), // leaf: keep for collection
            }
        }
        let mut by_node = HashMap::new();
        for (id, n) in inner.nodes.iter().enumerate() {
            if n.is_leaf {
                if let Some(g) = buf.slots[id].take() {
                    by_node.insert(id, Tensor::from_parts(n.shape.clone(), g));
                }
            }
        }
        if by_node.is_empty() {
            return Err(TensorError::DetachedLoss);
        }
        Ok(Gradients {
            tape_ptr: Rc::as_ptr(&tape),
            by_node,
        })
    }
}
