//! Reverse-mode automatic differentiation on N-dimensional tensors.
//!
//! Define-by-run: every operation immediately computes its value and, when
//! any input participates in differentiation, records a backward rule that
//! links the output to its parents. [`backward`] replays those rules in
//! exact reverse execution order (creation ids are monotone, so sorting by
//! id descending recovers the execution order) and accumulates gradients
//! with `+=` across fan-out.
//!
//! Broadcasting is deliberately restricted to two forms so every backward
//! rule stays auditable:
//! - scalar vs. tensor (a one-element tensor combines with any shape), and
//! - per-channel vs. NCHW (a rank-1 `[C]` tensor combines with a rank-4
//!   `[N, C, H, W]` tensor along the channel axis).
//!
//! All stored values must be finite; an operation whose output contains a
//! NaN or infinity fails with [`TensorError::NonFinite`] instead of
//! propagating the poison.

mod autograd;
mod conv;
mod gradcheck;
mod ops;

pub use autograd::backward;
pub use conv::{conv2d, deconv2d, prelu};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use ops::testing;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Element type tag carried by every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Byte code used by the on-disk tensor format.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`; the dtype is
/// a property of each tensor value, not a global switch.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + Default + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid geometry: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },
    #[error("{op}: singularity: |denominator| < {threshold:e} at flat index {index}")]
    Singularity {
        op: &'static str,
        index: usize,
        threshold: f64,
    },
    #[error("{op}: non-finite value produced at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar loss, got shape {dims:?}")]
    NotScalar { dims: Vec<usize> },
    #[error("{op}: expected {expected} data elements for dims {dims:?}, got {got}")]
    DataLength {
        op: &'static str,
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("grad_check: function is not deterministic (repeated evaluation mismatch)")]
    NonDeterministic,
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule recorded by an operation.
///
/// `backward` receives the upstream gradient of the op output and must
/// accumulate gradients into each parent that participates in
/// differentiation.
pub(crate) trait GradFn<T: Scalar> {
    fn backward(&self, grad_out: &[T]);
    fn parents(&self) -> Vec<Tensor<T>>;
}

pub(crate) struct TensorInner<T: Scalar> {
    id: u64,
    dims: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    grad_fn: Option<Rc<dyn GradFn<T>>>,
}

/// N-dimensional row-major tensor, shared by handle. Cloning is cheap and
/// aliases the same storage. A tensor and the graph hanging off it belong to
/// one thread; values are only mutated through [`Tensor::update_data`]
/// (optimizer steps) and gradient accumulation during [`backward`].
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, dims={:?}, dtype={}, requires_grad={})",
            self.inner.id,
            self.inner.dims,
            T::DTYPE,
            self.inner.requires_grad.get()
        )
    }
}

pub(crate) fn ensure_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op, index: i });
        }
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn make(
        dims: Vec<usize>,
        data: Vec<T>,
        grad_fn: Option<Rc<dyn GradFn<T>>>,
    ) -> Tensor<T> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                dims,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                grad_fn,
            }),
        }
    }

    /// Leaf tensor from explicit dims and row-major data.
    pub fn from_vec(dims: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidGeometry {
                op: "from_vec",
                detail: format!("dims must be non-empty with positive extents, got {dims:?}"),
            });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                op: "from_vec",
                dims,
                expected,
                got: data.len(),
            });
        }
        ensure_finite("from_vec", &data)?;
        Ok(Tensor::make(dims, data, None))
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor<T> {
        let n = dims.iter().product();
        Tensor::make(dims, vec![T::zero(); n], None)
    }

    pub fn full(dims: Vec<usize>, value: T) -> Tensor<T> {
        let n = dims.iter().product();
        Tensor::make(dims, vec![value; n], None)
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::make(vec![1], vec![value], None)
    }

    /// Mark this tensor as a differentiable leaf (a parameter).
    pub fn requires_grad(self, flag: bool) -> Tensor<T> {
        self.inner.requires_grad.set(flag);
        self
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn len(&self) -> usize {
        self.inner.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(TensorError::NotScalar {
                dims: self.inner.dims.to_vec(),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// True when this tensor participates in differentiation, either as a
    /// marked leaf or as the output of a recorded operation.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.grad_fn.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    /// Accumulated gradient, if backward has produced one.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place mutation of the raw buffer. Only sound on leaves between
    /// graph constructions (optimizer steps, finite-difference probes).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub(crate) fn grad_fn(&self) -> Option<Rc<dyn GradFn<T>>> {
        self.inner.grad_fn.clone()
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Detached copy: same values, fresh leaf, no history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::make(self.inner.dims.to_vec(), self.to_vec(), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor::<f32>::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::<f32>::from_vec(vec![2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        assert!(Tensor::<f64>::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![], vec![]).is_err());
    }

    #[test]
    fn ids_are_monotone() {
        let a = Tensor::<f32>::scalar(1.0);
        let b = Tensor::<f32>::scalar(2.0);
        assert!(b.id() > a.id());
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let t = Tensor::<f64>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
