//! Dense row-major tensors with a small reverse-mode tape.
//!
//! Everything is generic over [`Real`] so the same forward code runs in
//! 32-bit for training and in 64-bit for gradient checks.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{central_difference, finite_difference_check};
pub use tape::{Gradients, Tape, Var};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| G::from_f64(x.as_f64()).expect("cast"))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub(crate) fn scale_assign(&mut self, c: F) {
        for a in &mut self.data {
            *a = *a * c;
        }
    }
}

/// Softmax over the last axis with max-subtraction.
pub fn softmax<F: Real>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    logits.ensure_finite("softmax input")?;
    let (rows, cols) = logits.dims2();
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        kernels::softmax_row(logits.row(r), &mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Log-softmax over the last axis via log-sum-exp.
pub fn log_softmax<F: Real>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    logits.ensure_finite("log_softmax input")?;
    let (rows, cols) = logits.dims2();
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        kernels::log_softmax_row(logits.row(r), &mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(logits.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let t = Tensor::vector(vec![0.0f64; 4]);
        let s = softmax(&t).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let t = Tensor::vector(vec![1e4f32, 0.0]);
        let s = softmax(&t).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);

        let t = Tensor::vector(vec![1.0f64, 2.0, 3.0]);
        let s = softmax(&t).unwrap();
        // e^x / sum e^x evaluated by hand in 64-bit
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.data()[0] - 0.09003).abs() < 1e-5);
        assert!((s.data()[1] - 0.24473).abs() < 1e-5);
        assert!((s.data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::vector(vec![1.0f32, f32::NAN]);
        assert!(matches!(softmax(&t), Err(Error::NonFinite(_))));
        let t = Tensor::vector(vec![f64::INFINITY, 0.0]);
        assert!(log_softmax(&t).is_err());
    }

    #[test]
    fn log_softmax_stays_finite_for_tiny_probabilities() {
        let t = Tensor::vector(vec![0.0f32, 500.0]);
        let l = log_softmax(&t).unwrap();
        assert!(l.is_finite());
        assert!((l.data()[0] + 500.0).abs() < 1e-3);
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.dims2(), (2, 3));
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_permutation_equivariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..40),
            rot in 0usize..40,
        ) {
            let s = softmax(&Tensor::vector(xs.clone())).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));

            let k = rot % xs.len();
            let mut rotated = xs.clone();
            rotated.rotate_left(k);
            let sr = softmax(&Tensor::vector(rotated)).unwrap();
            let mut expect = s.data().to_vec();
            expect.rotate_left(k);
            for (a, b) in sr.data().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
