//! Dense row-major tensors and a tape for reverse-mode differentiation.
//!
//! Every numeric primitive used by the models and analyses is a method on
//! [`Tape`]. Operations record a backward rule only when one of their inputs
//! requires a gradient, so evaluation-only forwards cost nothing extra.

mod gradcheck;
mod ops;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheck};
pub use ops::Activation;
pub use tape::{Tape, TensorId};

/// Element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element types the tape can differentiate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = a·b (+ c if accumulate)` on strided row-major views.
    ///
    /// `a` is `m×k` with strides `sa`, `b` is `k×n` with strides `sb`, and
    /// `c` is a contiguous `m×n` block.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, a: usize, sa: (isize, isize), b: usize, sb: (isize, isize), c: usize) {
    let reach = |rows: usize, cols: usize, s: (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(sa.0 >= 0 && sa.1 >= 0 && sb.0 >= 0 && sb.1 >= 0);
    assert!(reach(m, k, sa) <= a, "gemm lhs view out of bounds");
    assert!(reach(k, n, sb) <= b, "gemm rhs view out of bounds");
    assert!(m * n <= c, "gemm output out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $tag;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (isize, isize),
                b: &[Self],
                sb: (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                check_gemm_bounds(m, k, n, a.len(), sa, b.len(), sb, c.len());
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every strided view was bounds-checked above and `c`
                // does not alias `a` or `b` (it is a distinct &mut borrow).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0,
                        sa.1,
                        b.as_ptr(),
                        sb.0,
                        sb.1,
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

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Dense numeric array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a tensor from f64 values, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let n = self.last_dim();
        &self.data[r * n..(r + 1) * n]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {i} out of bound {d}");
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean visibility pattern applied to the last two axes of a tensor.
///
/// The mask is `rows × cols`; a tensor viewed as `[N, cols]` uses mask row
/// `r % rows` for its row `r`, which broadcasts the mask over any leading
/// batch dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if rows * cols != keep.len() || rows == 0 {
            return Err(Error::InvalidMask(format!(
                "{rows}x{cols} mask with {} entries",
                keep.len()
            )));
        }
        Ok(Self { rows, cols, keep })
    }

    /// Lower-triangular `t × t` mask: query `i` sees keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        let keep = (0..t * t).map(|f| f % t <= f / t).collect();
        Self {
            rows: t,
            cols: t,
            keep,
        }
    }

    /// Causal mask over `t` keys plus one trailing column visible to every
    /// query.
    pub fn causal_with_sink(t: usize) -> Self {
        let cols = t + 1;
        let keep = (0..t * cols)
            .map(|f| {
                let (i, j) = (f / cols, f % cols);
                j == t || j <= i
            })
            .collect();
        Self { rows: t, cols, keep }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn visible(&self, row: usize, col: usize) -> bool {
        self.keep[(row % self.rows) * self.cols + col]
    }

    pub(crate) fn row_slice(&self, row: usize) -> &[bool] {
        let r = row % self.rows;
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f32>::new([2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f64>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.last_dim(), 3);
        assert_eq!(t.dtype(), DType::F64);
    }

    #[test]
    fn causal_masks() {
        let m = Mask::causal(3);
        assert!(m.visible(0, 0) && !m.visible(0, 1) && m.visible(2, 1));
        let s = Mask::causal_with_sink(2);
        assert_eq!(s.cols(), 3);
        assert!(s.visible(0, 2) && !s.visible(0, 1) && s.visible(1, 1));
        // broadcast over a leading batch of rows
        assert!(!m.visible(3, 1));
    }
}
