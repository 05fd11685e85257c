//! Dense NHWC tensors, the raw compute kernels, and a tape-based reverse-mode
//! autodiff engine built on top of them.
//!
//! Images and feature maps are always laid out as batch × height × width ×
//! channels. Convolution kernels are `kh × kw × Cin × Cout` and dense kernels
//! are `F × U`, so every weight is directly usable as a row-major GEMM operand.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Result, SmarcError};

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{ConvGeometry, Padding};

/// Scalar element type. Training runs in `f32`; `f64` exists for gradient checks.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// Default finite-difference step for this precision.
    const FD_EPSILON: f64;

    fn lit(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// `C = alpha * A·B + beta * C` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $eps:expr, $gemm:path) => {
        impl Real for $t {
            const FD_EPSILON: f64 = $eps;

            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Bounds are established by the callers' shape checks.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, 1e-3, matrixmultiply::sgemm);
impl_real!(f64, 1e-6, matrixmultiply::dgemm);

/// Dense row-major array. Data is shared and immutable; the optimizer is the
/// only writer, through [`Tensor::data_mut`] (copy-on-write).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SmarcError::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec_unchecked(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec_unchecked(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_vec_unchecked(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Mutable access for in-place parameter updates. Clones the buffer if any
    /// other tensor still shares it, so snapshots are never disturbed.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(SmarcError::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Value at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec_unchecked(
            self.shape.clone(),
            self.data.iter().map(|&v| U::lit(v.to_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(SmarcError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    /// Fails unless every element is exactly 0 or 1.
    pub fn check_binary(&self, op: &'static str) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| v != T::zero() && v != T::one())
        {
            Some(index) => Err(SmarcError::NonBinaryMask {
                op,
                index,
                value: self.data[index].to_f64(),
            }),
            None => Ok(()),
        }
    }

    /// Extents of a rank-4 NHWC tensor.
    pub fn nhwc(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, h, w, c] => Ok((b, h, w, c)),
            other => Err(SmarcError::invalid(
                op,
                format!("expected a rank-4 B×H×W×C tensor, got shape {other:?}"),
            )),
        }
    }

    /// Slice out batch element `i` of an NHWC tensor as a 1×H×W×C tensor.
    pub fn batch_item(&self, i: usize) -> Tensor<T> {
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec_unchecked(shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Stack equally-shaped tensors along a new leading batch axis, or along
    /// the existing one if they already carry a batch axis of 1.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| SmarcError::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(SmarcError::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        if shape.len() == 4 && shape[0] == 1 {
            shape[0] = items.len();
        } else {
            shape.insert(0, items.len());
        }
        Ok(Tensor::from_vec_unchecked(shape, data))
    }
}

impl<T: Real> std::fmt::Display for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn data_mut_does_not_disturb_clones() {
        let a = Tensor::<f32>::ones(&[4]);
        let mut b = a.clone();
        b.data_mut()[0] = 7.0;
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 7.0);
    }

    #[test]
    fn binary_check() {
        let m = Tensor::<f32>::new(&[3], vec![0.0, 1.0, 0.5]).unwrap();
        match m.check_binary("t") {
            Err(SmarcError::NonBinaryMask { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn at_and_stack() {
        let a = Tensor::<f32>::from_fn(&[1, 2, 2, 1], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[1, 2, 2, 1], |i| 10.0 + i as f32);
        let s = Tensor::stack(&[a, b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 1]);
        assert_eq!(s.at(&[1, 1, 0, 0]), 12.0);
        assert_eq!(s.batch_item(1), b);
    }
}
