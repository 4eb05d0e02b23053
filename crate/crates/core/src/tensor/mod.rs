//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: ops produce new tensors and the
//! backing buffer is shared through an `Arc`, so cloning is cheap. Float
//! tensors are checked for finiteness on construction; a NaN or infinity is
//! reported as [`Error::NonFinite`] rather than stored.

pub mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element types a tensor can hold. Integer element types are only used as
/// containers (labels, images on disk); arithmetic requires [`Scalar`].
pub trait Element: Copy + Debug + Default + PartialEq + Send + Sync + 'static {
    fn is_finite_value(&self) -> bool;
}

impl Element for u8 {
    fn is_finite_value(&self) -> bool {
        true
    }
}

impl Element for i64 {
    fn is_finite_value(&self) -> bool {
        true
    }
}

/// Floating point element type. `f32` is the default compute precision;
/// `f64` is used for finite-difference gradient checks.
pub trait Scalar:
    Element + Float + FromPrimitive + Display + Sum + AddAssign + SubAssign + MulAssign
{
    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("float conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

/// A borrowed matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: true,
        }
    }

    /// Row and column strides for an operand whose logical shape is
    /// `rows x cols`.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            // stored as cols x rows
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn is_finite_value(&self) -> bool {
                self.is_finite()
            }
        }

        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.data.len() >= m * k, "gemm: lhs too short");
                assert!(b.data.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                let (rsa, csa) = a.strides(m, k);
                let (rsb, csb) = b.strides(k, n);
                // SAFETY: the asserts above guarantee every strided access
                // stays inside the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        rsa,
                        csa,
                        b.data.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor. `dims.iter().product() == data.len()` always.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.dims)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        if self.data.len() > SHOWN {
            write!(f, "{head:?}...")
        } else {
            write!(f, "{head:?}")
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {dims:?}"),
            ));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        if !data.iter().all(Element::is_finite_value) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            dims,
            data: Arc::new(data),
        })
    }

    /// Construction for kernels that already validated shape; finiteness is
    /// still checked.
    pub(crate) fn from_op(op: &'static str, dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        if !data.iter().all(Element::is_finite_value) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self {
            dims,
            data: Arc::new(data),
        })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let numel = dims.iter().product();
        Self::new(dims, vec![value; numel])
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        let numel = dims.iter().product();
        Self::new(dims, (0..numel).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Mutable access to the buffer, copying it first if it is shared.
    /// Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) || dims.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        Ok(Self {
            dims,
            data: Arc::clone(&self.data),
        })
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.dims.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    pub fn same_dims(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
    }

    /// Interprets the tensor as `(batch, channels, height, width)`. Rank-3
    /// tensors are a batch of one.
    pub fn as_bchw(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.dims.as_slice() {
            [c, h, w] => Ok([1, c, h, w]),
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::shape(
                op,
                format!("expected C x H x W or B x C x H x W, got {:?}", self.dims),
            )),
        }
    }

    /// Interprets the tensor as a `rows x cols` matrix.
    pub fn as_matrix(&self, op: &'static str) -> Result<[usize; 2]> {
        match *self.dims.as_slice() {
            [r, c] => Ok([r, c]),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", self.dims),
            )),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(vec![n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn randn(dims: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::from_fn(dims, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
    }

    pub fn uniform(
        dims: impl Into<Vec<usize>>,
        low: f64,
        high: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::from_fn(dims, |_| T::from_f64_lossy(rng.random_range(low..high)))
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_op(
            op,
            self.dims.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        if !self.same_dims(other) {
            return Err(Error::shape(
                op,
                format!("operands differ: {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Self::from_op(
            op,
            self.dims.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map("scale", |v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if !self.same_dims(other) {
            return Err(Error::shape(
                "max_abs_diff",
                format!("operands differ: {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| U::from_f64_lossy(v.as_f64()))
                    .collect(),
            ),
        }
    }

    /// Sample `b` of a batched tensor, keeping the remaining dims.
    pub fn sample(&self, b: usize) -> Result<Self> {
        if self.rank() < 2 || b >= self.dims[0] {
            return Err(Error::shape(
                "sample",
                format!("no sample {b} in {:?}", self.dims),
            ));
        }
        let per = self.len() / self.dims[0];
        Self::from_op(
            "sample",
            self.dims[1..].to_vec(),
            self.data[b * per..(b + 1) * per].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if !t.same_dims(first) {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.dims, first.dims),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Self::from_op("stack", dims, data)
    }
}
