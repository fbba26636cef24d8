//! Minimal dense tensor kernels with hand-written backward passes.
//!
//! Everything the segmentation network needs and nothing more: a rank-4
//! tensor type, 3-D convolution, batch normalization, activations, pooling,
//! trilinear upsampling, classification losses, Adam, finite-difference
//! gradient checking, and a checkpoint format.
//!
//! Numeric contract:
//!
//! * Storage is generic over [`Scalar`] — `f32` for training, `f64` as the
//!   verification mode used by gradient checks and parity oracles.
//! * Every reduction (convolution sums, normalization moments, loss means,
//!   gradient accumulation over batch items) runs in `f64` accumulators and
//!   in a fixed, documented order, so results are bitwise reproducible at
//!   any worker count and, in `f64` mode, bit-for-bit comparable against
//!   naive reference implementations.
//! * There is no autodiff graph. Each operation exposes `forward` and a
//!   hand-derived `backward`; blocks compose them explicitly and cache what
//!   the backward pass needs.

pub mod activ;
pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activ::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, softmax2_backward,
    softmax2_forward,
};
pub use adam::Adam;
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
pub use conv::{Conv1, Conv3};
pub use gradcheck::{max_rel_error, numeric_gradient, rel_error, GradReport};
pub use loss::{ce_loss, focal_loss, loss_terms, wce_loss, LossKind, LossTerms};
pub use norm::BatchNorm;
pub use pool::{maxpool2_backward, maxpool2_forward, upsample2_backward, upsample2_forward};

use crate::error::{Error, Result};

/// Storage scalar for tensor values and gradients. `f32` is the training
/// precision; `f64` is the verification precision. Arithmetic inside kernels
/// always happens in `f64` regardless of the storage type.
pub trait Scalar:
    Copy + Clone + PartialEq + PartialOrd + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense rank-4 array with dims `(C, D, H, W)` — channels, then depth (z),
/// height (y), width (x), x fastest — and a lazily allocated gradient buffer
/// of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Scalar> {
    dims: [usize; 4],
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            values: vec![T::ZERO; dims.iter().product()],
            grad: None,
        }
    }

    pub fn from_values(dims: [usize; 4], values: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(Error::shape(format!(
                "{} values for dims {:?} (need {})",
                values.len(),
                dims,
                n
            )));
        }
        Ok(Tensor4 {
            dims,
            values,
            grad: None,
        })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor4::zeros(dims);
        for c in 0..dims[0] {
            for z in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        let i = t.idx(c, z, y, x);
                        t.values[i] = T::from_f64(f(c, z, y, x));
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn c(&self) -> usize {
        self.dims[0]
    }

    pub fn d(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of voxels per channel, `D·H·W`.
    pub fn spatial(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn idx(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[1] + z) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.values[self.idx(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: T) {
        let i = self.idx(c, z, y, x);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Gradient buffer, if one has been allocated.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.values.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    /// Gradient required by a backward pass; absent buffer is a bug in the
    /// composition order.
    pub fn grad_required(&self) -> Result<&[T]> {
        self.grad
            .as_deref()
            .ok_or_else(|| Error::shape("backward pass requires an upstream gradient"))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }

    /// Copy of the values in another storage precision (e.g. f32 → f64 for
    /// verification runs). The gradient buffer is not carried over.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            values: self.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    /// Concatenate along the channel axis; spatial dims must agree.
    pub fn concat_channels(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        if a.dims[1..] != b.dims[1..] {
            return Err(Error::shape(format!(
                "concat_channels spatial mismatch: {:?} vs {:?}",
                a.dims, b.dims
            )));
        }
        let dims = [a.c() + b.c(), a.d(), a.h(), a.w()];
        let mut values = Vec::with_capacity(dims.iter().product());
        values.extend_from_slice(&a.values);
        values.extend_from_slice(&b.values);
        Ok(Tensor4 {
            dims,
            values,
            grad: None,
        })
    }

    /// Split a gradient of a concatenated tensor back into the two parts'
    /// gradient buffers, accumulating.
    pub fn split_grad_into(
        concat: &Tensor4<T>,
        a: &mut Tensor4<T>,
        b: &mut Tensor4<T>,
    ) -> Result<()> {
        if a.c() + b.c() != concat.c() || a.dims[1..] != concat.dims[1..] {
            return Err(Error::shape("split_grad_into shape mismatch"));
        }
        let g = concat.grad_required()?.to_vec();
        let na = a.values.len();
        let ga = a.grad_mut();
        for i in 0..na {
            ga[i] = T::from_f64(ga[i].to_f64() + g[i].to_f64());
        }
        let gb = b.grad_mut();
        for (i, gv) in gb.iter_mut().enumerate() {
            *gv = T::from_f64(gv.to_f64() + g[na + i].to_f64());
        }
        Ok(())
    }
}

/// A named parameter tensor of arbitrary rank with a paired gradient buffer.
/// Rank and dims are kept explicitly for checkpointing; kernels index the
/// flat storage directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, value: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if value.len() != n {
            return Err(Error::shape(format!(
                "param value length {} does not match dims {:?}",
                value.len(),
                dims
            )));
        }
        Ok(Param {
            name: name.into(),
            dims,
            value,
            grad: vec![T::ZERO; n],
        })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Param {
            name: name.into(),
            dims,
            value: vec![T::ZERO; n],
            grad: vec![T::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|v| *v = T::ZERO);
    }

    /// Accumulate a slice of f64 partials into the gradient, in index order.
    pub fn add_grad(&mut self, partial: &[f64]) {
        debug_assert_eq!(partial.len(), self.grad.len());
        for (g, &p) in self.grad.iter_mut().zip(partial) {
            *g = T::from_f64(g.to_f64() + p);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            dims: self.dims.clone(),
            value: self.value.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: vec![U::ZERO; self.value.len()],
        }
    }
}

/// Check that every tensor in a batch shares `dims`; returns the dims.
pub fn batch_dims<T: Scalar>(batch: &[Tensor4<T>]) -> Result<[usize; 4]> {
    let first = batch
        .first()
        .ok_or_else(|| Error::shape("empty batch"))?
        .dims();
    for t in batch {
        if t.dims() != first {
            return Err(Error::shape(format!(
                "batch dims mismatch: {:?} vs {:?}",
                t.dims(),
                first
            )));
        }
    }
    Ok(first)
}
