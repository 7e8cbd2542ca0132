//! Dense row-major tensors and the reverse-mode tape that differentiates them.

mod gradcheck;
mod kernels;
mod tape;

use std::sync::Arc;

pub use gradcheck::{grad_check, grad_check_mixed, GradCheckReport};
pub use tape::{BackwardFn, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense tensor: shape, contiguous row-major values and an optional
/// accumulated gradient.
///
/// Values live behind an `Arc`, so cloning a tensor or registering it on a
/// [`Tape`] never copies the buffer. Mutation goes through
/// [`Tensor::data_mut`], which copies only while a tape still shares it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_arc(shape.to_vec(), Arc::new(data)))
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_arc(shape.to_vec(), Arc::new(vec![value; numel(shape)]))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::from_arc(shape.to_vec(), Arc::new(data))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.normal() * std))
    }

    /// Normal entries with `std`, resampled until they fall inside `±2 std`.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break T::from_f64_lossy(z * std);
            }
        })
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(lo + (hi - lo) * rng.uniform()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn arc(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Shape(format!("item() on shape {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self::from_arc(shape.to_vec(), Arc::clone(&self.data)))
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        let n = self.numel();
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Element-type conversion (used to lift f32 models into f64 for oracles).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .data
            .iter()
            .map(|v| U::from_f64_lossy(v.as_f64()))
            .collect();
        Tensor::from_arc(self.shape.clone(), Arc::new(data))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
