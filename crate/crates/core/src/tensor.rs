//! Dense N-dimensional tensors participating in a reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to an immutable value.
//! Operations that consume tensors with gradient requirements record an
//! [`OpRecord`](crate::tape::OpRecord) on the output, forming a DAG that the
//! tape walks backwards from a scalar loss. Canonical image layout is
//! N×C×H×W, row-major.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{BackwardFn, OpRecord};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner<T: Real> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<T>>,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<OpRecord<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Real> {
    pub(crate) inner: Rc<Inner<T>>,
}

impl<T: Real> Tensor<T> {
    fn construct(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<OpRecord<T>>,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} does not describe {} values", shape, data.len()),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        })
    }

    /// Leaf tensor that does not take gradients.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::construct(data, shape.to_vec(), false, None)
    }

    /// Leaf tensor that accumulates a gradient during backward (a parameter).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::construct(data, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::construct(vec![T::zero(); numel], shape.to_vec(), false, None).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::construct(vec![value; numel], shape.to_vec(), false, None).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Output of a recorded operation. Validates finiteness: a NaN/Inf result
    /// is an error state, not a value. The op record is only attached when
    /// some input actually needs a gradient, so inference builds no graph.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let record = if inputs.iter().any(|t| t.needs_grad()) {
            Some(OpRecord::new(name, inputs, backward))
        } else {
            None
        };
        Self::construct(data, shape, false, record)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when a gradient must flow into or through this tensor.
    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&OpRecord<T>> {
        self.inner.op.as_ref()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf tensor (optimizer updates, running
    /// statistics). Graph outputs are immutable once written.
    pub fn set_data(&self, values: &[T]) {
        assert!(self.inner.op.is_none(), "cannot overwrite an op output");
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(data.len(), values.len(), "set_data length mismatch");
        data.copy_from_slice(values);
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Like [`accumulate_grad`](Self::accumulate_grad) but takes ownership,
    /// avoiding a copy when this is the first contribution.
    pub(crate) fn accumulate_grad_owned(&self, contribution: Vec<T>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution),
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![T::one(); self.numel()]);
    }

    /// Reverse-mode pass from a scalar loss: populates `grad` on every
    /// tensor with gradient requirements reachable from it. The graph is
    /// single-shot; call on a rebuilt graph for the next step.
    pub fn backward(&self) -> Result<()> {
        crate::tape::backward(self)
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.op.as_ref().map(|o| o.name))
            .finish()
    }
}

/// Splits a 4-D shape into (N, C, H, W), erroring otherwise.
pub(crate) fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::shape(op, format!("expected N×C×H×W, got {:?}", other))),
    }
}
