//! Dense rank-1..4 tensor storage.
//!
//! Layout is row-major with the last axis fastest; images are stored
//! channel-major as (batch, channel, height, width). The element type is
//! `f32` by default, with an `f64` mode used by the gradient-check oracle.

use crate::error::{Result, SlakError};
use crate::rng::RngStream;

/// Element types the engine runs on. `f32` is the working precision,
/// `f64` backs gradient checking.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Gaussian error function, exact to the underlying libm routine.
    fn erf(self) -> Self;

    /// C = alpha * A(m x k) * B(k x n) + beta * C with explicit row/column
    /// strides per operand, so transposed views cost nothing.
    ///
    /// # Safety
    /// Every (row, col) reachable through the given strides must lie inside
    /// its buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_strided(
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

    /// C = alpha * A * B + beta * C, all operands row-major contiguous.
    ///
    /// # Safety
    /// Pointers must reference buffers of at least m*k, k*n and m*n elements.
    unsafe fn gemm_rowmajor(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        b: *const Self,
        beta: Self,
        c: *mut Self,
    ) {
        unsafe {
            Self::gemm_strided(
                m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
            )
        }
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm_strided(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_strided(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Fill strategy for [`Tensor::new`].
pub enum Init<'a, T: Scalar> {
    Zeros,
    Ones,
    Constant(T),
    /// Truncated normal: values outside +/- 2 sigma are resampled.
    TruncNormal { sigma: f64, stream: &'a mut RngStream },
    FromValues(&'a [T]),
}

/// Dense numeric array, rank 1 to 4, contiguous row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(SlakError::invalid_shape(format!(
            "rank must be 1..=4, got {:?}",
            shape
        )));
    }
    let mut n = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(SlakError::invalid_shape(format!(
                "zero extent in shape {:?}",
                shape
            )));
        }
        n = n
            .checked_mul(e)
            .ok_or_else(|| SlakError::invalid_shape(format!("shape overflow {:?}", shape)))?;
    }
    Ok(n)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], init: Init<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Constant(c) => vec![c; n],
            Init::TruncNormal { sigma, stream } => (0..n)
                .map(|_| T::from_f64(stream.trunc_normal(sigma)))
                .collect(),
            Init::FromValues(v) => {
                if v.len() != n {
                    return Err(SlakError::invalid_shape(format!(
                        "shape {:?} wants {} values, got {}",
                        shape,
                        n,
                        v.len()
                    )));
                }
                v.to_vec()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, Init::Zeros).expect("valid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::new(shape, Init::Ones).expect("valid shape")
    }

    pub fn full(shape: &[usize], c: T) -> Self {
        Tensor::new(shape, Init::Constant(c)).expect("valid shape")
    }

    pub fn from_values(shape: &[usize], values: &[T]) -> Result<Self> {
        Tensor::new(shape, Init::FromValues(values))
    }

    pub fn trunc_normal(shape: &[usize], sigma: f64, stream: &mut RngStream) -> Self {
        Tensor::new(shape, Init::TruncNormal { sigma, stream }).expect("valid shape")
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Shape as (batch, channel, height, width); lower ranks pad with 1 on the left.
    pub fn dims4(&self) -> [usize; 4] {
        let mut d = [1usize; 4];
        let off = 4 - self.shape.len();
        for (i, &e) in self.shape.iter().enumerate() {
            d[off + i] = e;
        }
        d
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = self.dims4();
        self.data[((b * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn set4(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let [_, cc, hh, ww] = self.dims4();
        self.data[((b * cc + c) * hh + h) * ww + w] = v;
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(SlakError::invalid_shape(format!(
                "zip_map: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scaled(&self, a: T) -> Tensor<T> {
        self.map(|x| x * a)
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(SlakError::invalid_shape(format!(
                "axpy: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (d, &s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
        Ok(())
    }

    pub fn iter_sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(SlakError::invalid_shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({n})",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Convert element type, used to lift an f32 model into the f64 checking path.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Debug-mode guard: engine operations must not produce NaN/Inf from
    /// finite inputs.
    #[inline]
    pub fn debug_assert_finite(&self, op: &str) {
        #[cfg(debug_assertions)]
        {
            for (i, v) in self.data.iter().enumerate() {
                assert!(
                    v.is_finite(),
                    "non-finite value {v:?} at flat index {i} after {op}"
                );
            }
        }
        #[cfg(not(debug_assertions))]
        {
            let _ = op;
        }
    }
}

/// Relative error |a-b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise relative error between two congruent tensors.
pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x.to_f64(), y.to_f64(), floor))
        .fold(0.0, f64::max)
}

/// Largest elementwise difference normalized by the reference tensor's
/// max-abs value. The right metric for comparing two accumulation orders
/// of the same sum: elements that nearly cancel are judged against the
/// tensor's scale instead of their own.
pub fn norm_max_err<T: Scalar>(got: &Tensor<T>, reference: &Tensor<T>) -> f64 {
    assert_eq!(got.shape(), reference.shape(), "norm_max_err shape mismatch");
    let scale = reference
        .data()
        .iter()
        .map(|&v| v.to_f64().abs())
        .fold(1e-12, f64::max);
    got.data()
        .iter()
        .zip(reference.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
        / scale
}
