//! The autodiff tape: recorded operations and the backward driver.
//!
//! Each op output carries an [`OpRecord`] referencing its inputs and a
//! backward rule. [`Tape::trace`] materializes the topological order of all
//! records reachable from a loss; [`backward`] replays it in reverse. A
//! record fires exactly once — re-running backward on a consumed graph is an
//! error.

use std::cell::Cell;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Backward rule: receives the output's gradient and value plus the input
/// tensors, and accumulates gradient contributions into the inputs.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[Tensor<T>])>;

pub(crate) struct OpRecord<T: Real> {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
    consumed: Cell<bool>,
}

impl<T: Real> OpRecord<T> {
    pub(crate) fn new(name: &'static str, inputs: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        debug_assert!(
            crate::ops::names::ALL.contains(&name),
            "op {name:?} is not registered in ops::names::ALL"
        );
        OpRecord { name, inputs, backward, consumed: Cell::new(false) }
    }
}

/// Ordered list of recorded operations: every entry's inputs precede it.
pub struct Tape<T: Real> {
    order: Vec<Tensor<T>>,
}

impl<T: Real> Tape<T> {
    /// Topological order of the graph below `root` (iterative post-order
    /// DFS, so graph depth cannot overflow the stack).
    pub fn trace(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, children_expanded)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            if let Some(rec) = t.op() {
                stack.push((t.clone(), true));
                for input in &rec.inputs {
                    if !visited.contains(&input.id()) && input.op().is_some() {
                        stack.push((input.clone(), false));
                    }
                }
            } else {
                order.push(t);
            }
        }
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub(crate) fn backward<T: Real>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { numel: loss.numel() });
    }
    if loss.op().is_none() {
        if loss.requires_grad() {
            // A bare parameter used as loss: gradient is trivially one.
            loss.seed_grad_ones();
            return Ok(());
        }
        return Err(Error::DetachedGraph);
    }

    let tape = Tape::trace(loss);
    for t in &tape.order {
        if let Some(rec) = t.op() {
            if rec.consumed.get() {
                return Err(Error::BackwardConsumed);
            }
        }
    }

    loss.seed_grad_ones();
    for t in tape.order.iter().rev() {
        let Some(rec) = t.op() else { continue };
        let grad = t.inner.grad.borrow();
        let Some(grad) = grad.as_ref() else {
            // No gradient flowed here (dead branch); still mark consumed.
            rec.consumed.set(true);
            continue;
        };
        let data = t.inner.data.borrow();
        (rec.backward)(grad, &data, &rec.inputs);
        rec.consumed.set(true);
    }
    Ok(())
}
