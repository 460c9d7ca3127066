//! Dense row-major tensors with shared storage and optional gradients.

use crate::{Result, TensorError};
use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

/// On-disk / runtime element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(TensorError::Invalid(format!("unknown dtype {name:?}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Element types the engine supports. The bound pulls in ordinary float
/// arithmetic from `num_traits`; the extras cover serialization and literal
/// conversion.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const DTYPE: Dtype;
    fn encode_le(self, out: &mut Vec<u8>);
    fn decode_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn encode_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn encode_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }
}

/// Convert an `f64` literal into any [`Scalar`].
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 converts into every Scalar")
}

/// A dense row-major tensor. `clone` is shallow (shared storage); parameters
/// rely on that to stay visible to both the optimizer and the tape. The
/// gradient slot is shared too, so enabling or disabling gradients through
/// any handle affects every clone of the same tensor.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<T>>>,
    grad: Rc<RefCell<Option<Vec<T>>>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "from_vec",
                message: format!("shape {shape:?} wants {numel} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(RefCell::new(data)),
            grad: Rc::new(RefCell::new(None)),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(RefCell::new(vec![T::zero(); numel])),
            grad: Rc::new(RefCell::new(None)),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(RefCell::new(vec![value; numel])),
            grad: Rc::new(RefCell::new(None)),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(vec![1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.data.borrow_mut()
    }

    /// Copy the contents out.
    pub fn to_vec(&self) -> Vec<T> {
        self.data.borrow().clone()
    }

    /// Deep copy with its own storage; gradient flag is preserved but the
    /// gradient buffer starts at zero.
    pub fn deep_clone(&self) -> Self {
        let t = Tensor {
            shape: self.shape.clone(),
            data: Rc::new(RefCell::new(self.to_vec())),
            grad: Rc::new(RefCell::new(None)),
        };
        if self.requires_grad() {
            t.enable_grad();
        }
        t
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.borrow().is_some()
    }

    /// Allocate a zeroed gradient buffer (idempotent). Shared across every
    /// clone of this tensor.
    pub fn enable_grad(&self) -> &Self {
        let mut g = self.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![T::zero(); self.numel()]);
        }
        self
    }

    pub fn disable_grad(&self) -> &Self {
        *self.grad.borrow_mut() = None;
        self
    }

    pub fn with_grad(self) -> Self {
        self.enable_grad();
        self
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        Ref::filter_map(self.grad.borrow(), |g| g.as_ref()).ok()
    }

    pub fn grad_mut(&self) -> Option<RefMut<'_, Vec<T>>> {
        RefMut::filter_map(self.grad.borrow_mut(), |g| g.as_mut()).ok()
    }

    pub(crate) fn grad_handle(&self) -> Rc<RefCell<Option<Vec<T>>>> {
        self.grad.clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.grad.borrow_mut().as_mut() {
            g.fill(T::zero());
        }
    }

    /// Largest absolute element (0 for empty tensors).
    pub fn max_abs(&self) -> T {
        self.data
            .borrow()
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data.borrow();
        let preview: Vec<&T> = data.iter().take(8).collect();
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape,
            if self.requires_grad() { "+grad " } else { " " },
            preview,
            if data.len() > 8 { "..." } else { "" }
        )
    }
}
