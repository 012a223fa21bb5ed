//! Dense n-dimensional float tensors with an optional gradient accumulator.
//!
//! A `Tensor` is a cheap-to-clone handle (`Rc<RefCell<..>>`) so that the
//! tape, parameter stores, and caller code can all refer to the same
//! storage. Data is flat row-major; slicing copies.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand_chacha::rand_core::RngCore;

use crate::error::{Error, Result};
use crate::Float;

struct TensorData {
    shape: Vec<usize>,
    data: Vec<Float>,
    grad: Option<Vec<Float>>,
    requires_grad: bool,
}

/// Shared handle to a dense float array. Cloning the handle aliases the
/// underlying storage; use [`Tensor::detached`] for a value copy.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Non-trainable tensor from flat row-major data.
    pub fn from_data(shape: &[usize], data: Vec<Float>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero dimension in shape {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::shape(
                "from_data",
                format!("shape {:?} wants {} values, got {}", shape, numel_of(shape), data.len()),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    /// Trainable tensor (participates in gradient recording).
    pub fn param(shape: &[usize], data: Vec<Float>) -> Result<Tensor> {
        let t = Tensor::from_data(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_data(shape, vec![0.0; numel_of(shape)]).expect("zeros: valid shape")
    }

    /// Scalar wrapped as a one-element tensor.
    pub fn scalar(v: Float) -> Tensor {
        Tensor::from_data(&[1], vec![v]).expect("scalar")
    }

    /// Uniform sample in `(lo, hi)`, elementwise.
    pub fn uniform(shape: &[usize], lo: Float, hi: Float, rng: &mut impl RngCore) -> Tensor {
        let n = numel_of(shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let u = (rng.next_u64() >> 11) as Float / (1u64 << 53) as Float;
            data.push(lo + u * (hi - lo));
        }
        Tensor::from_data(shape, data).expect("uniform: valid shape")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the flat data. Keep the borrow short-lived.
    pub fn data(&self) -> Ref<'_, [Float]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<Float> {
        self.inner.borrow().data.clone()
    }

    pub fn set_data(&self, values: &[Float]) -> Result<()> {
        let mut d = self.inner.borrow_mut();
        if values.len() != d.data.len() {
            return Err(Error::shape(
                "set_data",
                format!("tensor holds {} values, got {}", d.data.len(), values.len()),
            ));
        }
        d.data.copy_from_slice(values);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, rg: bool) {
        self.inner.borrow_mut().requires_grad = rg;
    }

    /// Current accumulated gradient, if any backward pass has reached this
    /// tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<Float>> {
        self.inner.borrow().grad.clone()
    }

    /// Add `g` into the gradient accumulator (allocating it on first use).
    pub fn accumulate_grad(&self, g: &[Float]) {
        let mut d = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), d.data.len(), "gradient length mismatch");
        match &mut d.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => d.grad = Some(g.to_vec()),
        }
    }

    /// Drop the accumulator; the next backward pass starts fresh.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Value copy with no gradient state and `requires_grad = false`.
    pub fn detached(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::from_data(&d.shape, d.data.clone()).expect("detached")
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Stable identity of the underlying storage, used as a map key during
    /// backward. Valid only while some handle keeps the tensor alive.
    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as *const () as usize
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("data", &d.data)
            .finish()
    }
}
