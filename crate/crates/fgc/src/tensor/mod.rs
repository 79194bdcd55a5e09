//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Values are row-major and always finite: any operation that would produce
//! NaN or Inf from finite inputs reports [`Error::Numeric`] instead of letting
//! the value propagate. Gradients are recorded on an explicit [`Tape`] and
//! populated by [`Tape::backward`].

mod tape;

pub mod ops;
pub mod optim;

#[cfg(test)]
mod op_tests;

pub use tape::Tape;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Forward-pass mode: training uses batch statistics and stochastic gates,
/// evaluation uses running statistics and deterministic hard gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Cheap-to-clone handle to a dense float64 value and its gradient slot.
///
/// Handles are reference-counted and single-threaded; model replicas on
/// other threads should rebuild tensors from raw parts (`shape` + data).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        })
    }

    /// Constant (non-trainable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_parts(shape.to_vec(), data, false)
    }

    /// Trainable tensor: participates in recording and receives gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_parts(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], false).expect("zeros")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n], false).expect("full")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![], vec![value], false).expect("scalar")
    }

    pub(crate) fn output(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor::from_parts(shape, data, requires_grad).expect("op output shape/data agree")
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

    /// Borrow the value buffer (row-major).
    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Detached copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Overwrite the value buffer in place (same length required).
    /// Must not be called mid-tape on a tensor already recorded.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut d = self.inner.data.borrow_mut();
        if d.len() != data.len() {
            return Err(Error::contract(format!(
                "set_data: length {} != {}",
                data.len(),
                d.len()
            )));
        }
        d.copy_from_slice(data);
        Ok(())
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Accumulated gradient; zeros when nothing reached this tensor.
    pub fn grad(&self) -> Vec<f64> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn grad_clone(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Add `delta` into the gradient accumulator.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Pointer identity (same underlying storage).
    pub fn same_as(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Check a freshly computed buffer for NaN/Inf and name the operation.
pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(Error::numeric(op, format!("non-finite value {v}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_defaults_to_zeros() {
        let t = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad(), vec![0.0; 3]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad(), vec![1.5; 3]);
        t.zero_grad();
        assert_eq!(t.grad(), vec![0.0; 3]);
    }

    #[test]
    fn item_requires_single_element() {
        assert!(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().item().is_err());
        assert_eq!(Tensor::scalar(4.0).item().unwrap(), 4.0);
    }
}
