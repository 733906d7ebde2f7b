//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: contiguous row-major storage, broadcast
//! restricted to leading-axis expansion, and an explicit single-use [`Tape`]
//! per training step. All primitives are differentiable and checked against
//! central finite differences in the test suite.

mod ops;
mod rng;
mod tape;

pub mod gradcheck;

#[cfg(test)]
mod tests;

pub use rng::RngStream;
pub use tape::{Gradients, Tape};

use std::fmt::{Debug, Display};
use std::sync::Arc;

use tape::NodeRef;

/// Element type of a tensor. Training runs at `f32`; gradient-check tests
/// instantiate the same code at `f64`.
pub trait Scalar: num_traits::Float + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: extents must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric domain error in {0}: non-finite input")]
    NonFinite(&'static str),
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("operands belong to different tapes")]
    TapeMismatch,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any watched parameter; gradients would be empty")]
    DetachedLoss,
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

/// Immutable dense tensor. Cloning is cheap (shared storage); any operation
/// with a tape-tracked input records itself for the backward pass.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    pub(crate) node: Option<NodeRef<T>>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Contract(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self::from_parts(shape.to_vec(), vec![T::zero(); n]))
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts(self.shape.clone(), vec![T::zero(); self.numel()])
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self::from_parts(shape.to_vec(), vec![value; n]))
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// I.i.d. standard normal samples from a fresh deterministic stream.
    pub fn randn(shape: &[usize], seed: u64) -> Result<Self> {
        Self::randn_with(shape, &mut RngStream::new(seed))
    }

    /// I.i.d. standard normal samples drawn from an existing stream.
    pub fn randn_with(shape: &[usize], rng: &mut RngStream) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.normal())).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.uniform_in(lo, hi))).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_tracked(&mut self, node: NodeRef<T>, requires_grad: bool) {
        self.node = Some(node);
        self.requires_grad = requires_grad;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// A copy that does not participate in any tape.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            node: None,
        }
    }

    /// Replace the stored values, dropping any tape association.
    /// Used by the optimizer between steps.
    pub fn assign(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::Contract(format!(
                "assign length {} does not match shape {:?}",
                data.len(),
                self.shape
            )));
        }
        self.data = Arc::new(data);
        self.node = None;
        Ok(())
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        self.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Cast between precisions, detaching from any tape.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
