//! Dense row-major tensors and a reverse-mode tape.
//!
//! Tensors are contiguous buffers with a shape; there are no views or
//! strides. A [`Tape`] records operations on [`Var`] handles and replays
//! them backwards to produce gradients for leaves created with
//! `requires_grad`.

mod gradcheck;
pub(crate) mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::{SegmentLossKind, UnaryOp};
pub use tape::{Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::FromPrimitive;

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (training) and `f64` (checking).
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Strided `c = a·b (+ c)`; see [`gemm_strided`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every float type")
    }
}

impl Float for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Element-stride description of one matrix operand laid out inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatRef {
    pub fn row_major(cols: usize) -> Self {
        MatRef { offset: 0, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        MatRef { offset: 0, rs: 1, cs: cols }
    }

    pub fn at(self, offset: usize) -> Self {
        MatRef { offset, ..self }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        self.offset + rows.saturating_sub(1) * self.rs + cols.saturating_sub(1) * self.cs
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with arbitrary element strides.
///
/// Bounds are checked up front so the unsafe kernel never reads or writes
/// outside the slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    am: MatRef,
    b: &[F],
    bm: MatRef,
    c: &mut [F],
    cm: MatRef,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[cm.offset + i * cm.rs + j * cm.cs] = F::zero();
                }
            }
        }
        return;
    }
    assert!(am.last(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(bm.last(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(cm.last(m, n) < c.len(), "gemm: output out of bounds");
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: every index touched lies within the slices (asserted above)
    // and `c` is uniquely borrowed.
    unsafe {
        F::raw_gemm(
            m,
            k,
            n,
            a.as_ptr().add(am.offset),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr().add(bm.offset),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.rs as isize,
            cm.cs as isize,
        )
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent (the last axis).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::of(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs a matrix".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Tensor::new(vec![c, r], data)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_strided(
            m,
            k,
            n,
            &self.data,
            MatRef::row_major(k),
            &other.data,
            MatRef::row_major(n),
            &mut out,
            MatRef::row_major(n),
            false,
        );
        Tensor::new(vec![m, n], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn identity_matmul_is_noop() {
        let x = Tensor::<f64>::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect())
            .unwrap();
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn transpose_roundtrip() {
        let x = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = x.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(t.transpose().unwrap(), x);
    }
}

#[cfg(test)]
mod op_tests;
