//! Reverse-mode differentiation over dense NCHW tensors.
//!
//! A [`Tensor`] is a reference-counted node. Operations that touch a tensor
//! with `requires_grad` record a backward closure together with their parents,
//! so the graph reachable from any output is its tape. Tapes are confined to
//! the thread that built them; anything that crosses a thread or a socket
//! travels as a detached [`TensorData`].

mod backward;
pub mod ops;
pub mod optim;

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use backward::backward_seeded;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape contract violated: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    Argument { op: &'static str, detail: String },
    #[error("backward: {0}")]
    Backward(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Argument { op, detail: detail.into() }
}

/// Detached, thread-transferable tensor contents.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {n} values but {} were given", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Raw payload size in bytes.
    pub fn byte_len(&self) -> usize {
        self.data.len() * T::DTYPE.size()
    }
}

impl<T: fmt::Debug> fmt::Debug for TensorData<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorData")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct GradFn<T: Scalar> {
    pub(crate) op: &'static str,
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<T>>,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad_fn: Option<GradFn<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// N-dimensional array participating in reverse-mode differentiation.
///
/// Cloning a `Tensor` clones the handle, not the storage.
pub struct Tensor<T: Scalar> {
    pub(crate) node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { node: Rc::clone(&self.node) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let td = TensorData::new(shape.to_vec(), data)?;
        Ok(Self::make(td.shape, td.data, false, None))
    }

    /// Leaf that accumulates a gradient.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let td = TensorData::new(shape.to_vec(), data)?;
        Ok(Self::make(td.shape, td.data, true, None))
    }

    pub fn leaf(data: TensorData<T>, requires_grad: bool) -> Self {
        Self::make(data.shape, data.data, requires_grad, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::make(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::make(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![], vec![value], false, None)
    }

    /// Result of an operation. Records `backward` only when some parent needs a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            let grad_fn = GradFn { op, parents, backward: Box::new(backward) };
            Self::make(shape, data, true, Some(grad_fn))
        } else {
            Self::make(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// In-place access to the storage. Intended for optimizer updates and
    /// running statistics on leaves; mutating a tensor that a live tape still
    /// references corrupts that tape's backward pass.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy of the contents, cut from any tape.
    pub fn detach(&self) -> TensorData<T> {
        TensorData { shape: self.node.shape.clone(), data: self.to_vec() }
    }

    /// Backpropagates from a scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Backward(format!(
                "implicit seed requires a scalar, got shape {:?}; use backward_with",
                self.shape()
            )));
        }
        backward_seeded(&[(self.clone(), vec![T::one()])])
    }

    /// Backpropagates an externally supplied gradient for this tensor.
    pub fn backward_with(&self, grad: Vec<T>) -> Result<()> {
        backward_seeded(&[(self.clone(), grad)])
    }
}

/// Asserts exact rank and returns the dims (for NCHW this is `[n, c, h, w]`).
pub(crate) fn dims4<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(shape_err(op, format!("expected an NCHW tensor, got shape {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_shape() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(t.numel(), 4);
        assert!(!t.requires_grad());
    }

    #[test]
    fn detach_drops_tape_membership() {
        let p = Tensor::<f64>::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = ops::scale(&p, 2.0);
        assert!(y.requires_grad());
        let d = Tensor::leaf(y.detach(), false);
        assert!(d.is_leaf() && !d.requires_grad());
        assert_eq!(d.to_vec(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_backward_needs_seed() {
        let p = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = ops::scale(&p, 3.0);
        assert!(matches!(y.backward(), Err(TensorError::Backward(_))));
        y.backward_with(vec![1.0, 1.0]).unwrap();
        assert_eq!(p.grad().unwrap(), vec![3.0, 3.0]);
    }
}
