//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are contiguous row-major buffers with up to five axes
//! (batch, channel, t, h, w). Everything is generic over [`Scalar`]: f32 is
//! the working precision, f64 is used by the gradient checker.

use std::fmt;

use crate::error::{Error, Result};

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod optim;

pub use conv::{conv3d_forward, conv3d_naive, conv_geometry, window_sum3d, ConvGeom};
pub use gradcheck::{gradient_check, run_standard_suite, GradCheckReport};
pub use graph::{Graph, GroupedMask, VarId};
pub use optim::{adam_step, AdamHyper, ParamStore};

/// Element type of all tensor math. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C(m x n) = alpha * A(m x k) * B(k x n) + beta * C, arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
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
            )
        }
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
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
            )
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.is_empty() || shape.len() > 5 {
            return Err(Error::shape(format!("1..=5 axes supported, got {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single element of a scalar (shape [1]) tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Interpret the shape as [b, c, t, h, w]; exactly five axes required.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::shape(format!("expected 5 axes, got {:?}", self.shape)));
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3], self.shape[4]])
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v.as_f64()).collect() }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Tensor<F> {
        Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| F::from_f64(v)).collect() }
    }

    /// Fill with samples from U(-bound, bound).
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl rand::Rng) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

pub(crate) fn same_shape<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{}: shape mismatch {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
