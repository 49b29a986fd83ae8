use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::Scalar;
use crate::error::{Error, Result};

thread_local! {
    static ZERO_NORM_EVENTS: Cell<u64> = const { Cell::new(0) };
}

/// Records a cosine or normalization evaluated at a zero vector.
pub(crate) fn note_zero_norm() {
    ZERO_NORM_EVENTS.with(|c| c.set(c.get() + 1));
}

/// Zero-vector cosine events seen on this thread since the last call.
pub fn take_zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.with(|c| c.replace(0))
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) parents: Vec<Tensor<T>>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Dense row-major array with an optional gradient slot and a link to the
/// operation that produced it.
///
/// `Tensor` is a cheap reference-counted handle: cloning shares storage.
/// Graphs are single-threaded; use [`Tensor::detach`] plus [`Tensor::to_vec`]
/// to move values across threads.
pub struct Tensor<T: Scalar = f32>(Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if data.len() <= 16 {
            d.field("data", &*data);
        }
        d.field("requires_grad", &self.0.requires_grad).finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape, data, false)
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape, data, true)
    }

    fn build(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::leaf_unchecked(shape.to_vec(), data, requires_grad))
    }

    pub(crate) fn leaf_unchecked(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node: None,
        }))
    }

    /// Output of an operation. Gradients are tracked iff any parent tracks them.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: Vec<Tensor<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then_some(Node { op, parents });
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![T::zero(); numel(shape)])
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf_unchecked(vec![], vec![value], false)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let data = self.0.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        data[0]
    }

    /// Overwrites the values in place. Only meaningful for leaves; any graph
    /// already built from this tensor keeps referring to the new values.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "set_data: shape {:?} holds {} values, got {}",
                self.0.shape,
                self.numel(),
                data.len()
            )));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// A constant copy with no graph linkage.
    pub fn detach(&self) -> Self {
        Self::leaf_unchecked(self.0.shape.clone(), self.to_vec(), false)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }

    fn node(&self) -> Option<&Node<T>> {
        self.0.node.as_ref()
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// calls; intermediate gradients are recomputed on every call.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for t in &order {
            if !t.is_leaf() {
                t.zero_grad();
            }
        }
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let Some(node) = t.node() else { continue };
            let Some(grad) = t.grad() else { continue };
            let parent_grads = node.op.backward(&grad, &node.parents, t);
            for (p, g) in node.parents.iter().zip(parent_grads) {
                if let (true, Some(g)) = (p.requires_grad(), g) {
                    p.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-tracking subgraph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for p in &node.parents {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
