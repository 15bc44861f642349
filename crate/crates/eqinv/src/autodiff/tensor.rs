//! Dense float64 tensors with optional gradient buffers.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{EqInvError, Result};

#[derive(Debug)]
struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared handle to a dense row-major float64 tensor.
///
/// Cloning a `Tensor` clones the handle, not the storage: parameters stay
/// shared between model structs and tape nodes, so gradients accumulated by
/// [`Tape::backward`](super::Tape::backward) are visible to the optimizer.
///
/// ```
/// use eqinv::autodiff::Tensor;
/// let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
/// assert_eq!(t.shape(), vec![2, 2]);
/// assert_eq!(t.numel(), 4);
/// ```
#[derive(Clone, Debug)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EqInvError::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[1]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![0.0; numel], shape).unwrap()
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(vec![1.0; numel], shape).unwrap()
    }

    /// Builder-style toggle, used when creating parameters.
    pub fn requires_grad(self, yes: bool) -> Tensor {
        self.inner.borrow_mut().requires_grad = yes;
        self
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Stable identity of the underlying storage, used as a key during
    /// backward traversal.
    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    /// Rows of a rank-2 tensor (or length of a rank-1 tensor).
    pub fn rows(&self) -> usize {
        self.inner.borrow().shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        let inner = self.inner.borrow();
        match inner.shape.len() {
            2 => inner.shape[1],
            _ => 1,
        }
    }

    /// Borrow the data in place.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |inner| inner.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar");
        inner.data[0]
    }

    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Drop any accumulated gradient. Gradient reset is explicit: backward
    /// always accumulates into whatever is already present.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(inner.data.len(), delta.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    /// Read data and gradient together while applying an in-place update,
    /// e.g. an optimizer step.
    pub fn update(&self, f: impl FnOnce(&mut [f64], Option<&[f64]>)) {
        let mut inner = self.inner.borrow_mut();
        let Inner { data, grad, .. } = &mut *inner;
        f(data.as_mut_slice(), grad.as_deref());
    }

    /// Copy of this tensor that does not require gradients and is not
    /// connected to any tape: the stop-gradient primitive.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_vec(inner.data.clone(), &inner.shape).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}
