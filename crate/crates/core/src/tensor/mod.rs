//! Dense row-major tensors and the layer math built on top of them.
//!
//! Feature maps are laid out channels-last: a single image is `H x W x C`
//! and a batch is `N x H x W x C`. Every layer function accepts either
//! form and returns a result of the same rank. Nothing broadcasts
//! implicitly; any shape disagreement is a [`TensorError`].
//!
//! All kernels are generic over [`Element`] so the same code can be run in
//! `f64` when checking gradients numerically. Dot products accumulate in
//! `f64` regardless of the element type.

mod activation;
mod conv;
mod dense;
mod norm;
mod pool;

pub use activation::{
    add, concat_channels, concat_channels_backward, dropout_backward, dropout_train, relu,
    relu_backward, softmax, softmax_xent, softmax_xent_backward,
};
pub use conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, output_extent,
    pointwise_conv2d, pointwise_conv2d_backward, ConvGrads, ConvParams, DepthwiseGrads,
    DepthwiseParams,
};
pub use dense::{dense, dense_backward, Activation, DenseGrads, DenseParams};
pub use norm::{
    batchnorm, batchnorm_backward, batchnorm_train, BatchNormCache, BatchNormGrads,
    BatchNormParams, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM,
};
pub use pool::{pool, pool_backward, PoolKind, PoolSpec};

pub(crate) use conv::{
    conv2d_backward_view, conv2d_view, depthwise_backward_view, depthwise_view, ConvView,
    DepthwiseView,
};
pub(crate) use dense::{dense_backward_view, dense_view, DenseView};

use num_traits::Float;
use std::fmt::Debug;
use thiserror::Error;

/// Scalar type a [`Tensor`] can hold.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn wide(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
}

impl TensorError {
    pub(crate) fn dim(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        TensorError::Dimension {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn shape(shape: &[usize], reason: impl Into<String>) -> Self {
        TensorError::Shape {
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Maximum supported rank.
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(TensorError::dim("data length", len, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let len = data.len();
        Self::new(&[len], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts to another element type (used to run kernels in f64).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.wide())).collect(),
        }
    }

    /// Elementwise `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        same_shape(&self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::shape(shape, "rank must be between 1 and 4"));
    }
    if shape.contains(&0) {
        return Err(TensorError::shape(shape, "dimensions must be positive"));
    }
    Ok(())
}

pub(crate) fn same_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(TensorError::dim("rank", expected.len(), actual.len()));
    }
    for (axis, (&e, &a)) in expected.iter().zip(actual).enumerate() {
        if e != a {
            return Err(TensorError::dim(format!("axis {axis}"), e, a));
        }
    }
    Ok(())
}

/// A feature map viewed as `N x H x W x C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Nhwc {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub batched: bool,
}

impl Nhwc {
    pub fn of<T>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape.as_slice() {
            [h, w, c] => Ok(Nhwc {
                n: 1,
                h,
                w,
                c,
                batched: false,
            }),
            [n, h, w, c] => Ok(Nhwc {
                n,
                h,
                w,
                c,
                batched: true,
            }),
            _ => Err(TensorError::shape(
                &t.shape,
                "feature map must be HxWxC or NxHxWxC",
            )),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.n, self.h, self.w, self.c]
        } else {
            vec![self.h, self.w, self.c]
        }
    }

    pub fn with(&self, h: usize, w: usize, c: usize) -> Nhwc {
        Nhwc { h, w, c, ..*self }
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, ch: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + ch
    }

    pub fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }
}
