//! Dense tensors, the numeric kernels behind every layer, and a tape-based
//! reverse-mode autodiff engine.

mod gradcheck;
pub mod kernels;
mod tape;

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheck};
pub use tape::{BatchStats, Gradients, Tape, Var};

/// Highest rank any tensor in this crate carries (N, C, H, W).
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element types a [`Tensor`] can hold.
pub trait Element:
    Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` on row/column strided matrices
    /// (a: m×k, b: k×n, c: m×n).
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing matrices of the
    /// given extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..={MAX_RANK}, got {}", shape.len()),
        ));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(
            "tensor",
            format!("extent of axis {axis} must be >= 1"),
        ));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {numel} elements but buffer has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Self::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Marks the tensor as a differentiable leaf when placed on a tape.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Same buffer, new extents.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let requires_grad = self.requires_grad;
        Ok(Self::new(shape, self.data)?.with_grad(requires_grad))
    }

    /// Extents as (N, C, H, W); fails unless rank is 4.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected rank-4 N×C×H×W tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Channel slice `[c0, c1)` of a rank-4 tensor.
    pub fn narrow_channels(&self, c0: usize, c1: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4("narrow_channels")?;
        if c0 >= c1 || c1 > c {
            return Err(Error::shape(
                "narrow_channels",
                format!("channel range {c0}..{c1} out of 0..{c}"),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (c1 - c0) * plane);
        for b in 0..n {
            let base = b * c * plane;
            out.extend_from_slice(&self.data[base + c0 * plane..base + c1 * plane]);
        }
        Self::new(vec![n, c1 - c0, h, w], out)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }
}
