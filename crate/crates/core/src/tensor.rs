//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a flat buffer. Gradients live on
//! the [`Graph`](crate::autodiff::Graph) that records operations over tensors,
//! so a parameter can be shared by many graphs without interior mutability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// How [`Tensor::create`] fills a new tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Init<T> {
    Constant(T),
    /// Normal draws rejected outside `mean ± 2·std`.
    TruncatedNormal { mean: f64, std: f64, seed: u64 },
    FromValues(Vec<T>),
}

pub(crate) fn check_extents(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape(op, "rank-0 shapes are not supported, use [1]"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(op, format!("extent {pos} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_extents("tensor", &shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn create(shape: impl Into<Vec<usize>>, init: Init<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_extents("tensor_create", &shape)?;
        match init {
            Init::Constant(c) => Ok(Tensor { shape, data: vec![c; n] }),
            Init::FromValues(values) => Tensor::new(shape, values),
            Init::TruncatedNormal { mean, std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::truncated_normal(shape, mean, std, &mut rng)
            }
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::one())
    }

    /// Panics on a zero extent; use [`Tensor::create`] for fallible construction.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        Tensor::create(shape, Init::Constant(value)).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn truncated_normal<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = shape.into();
        let n = check_extents("tensor_create", &shape)?;
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "truncated normal needs finite mean and positive std, got ({mean}, {std})"
            )));
        }
        let normal = Normal::new(mean, std).expect("validated parameters");
        let (lo, hi) = (mean - 2.0 * std, mean + 2.0 * std);
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let v: f64 = normal.sample(rng);
            if (lo..=hi).contains(&v) {
                // rounding to T must not leave the interval either
                let t = T::of(v);
                if t.as_f64() >= lo && t.as_f64() <= hi {
                    data.push(t);
                }
            }
        }
        Ok(Tensor { shape, data })
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

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_extents("reshape", &shape)?;
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at a multi-index; panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element type conversion, e.g. an `f32` model promoted to `f64` for gradient checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}
