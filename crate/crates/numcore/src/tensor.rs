use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, NumError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. No views or strides: every tensor owns its data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return shape_err("tensor", format!("zero-sized axis in {shape:?}"));
        }
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds from `f64` values, rounding to `F`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| F::from_f64_lossy(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized axis in {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Samples `normal(0, std)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = F::from_f64_lossy(z * std);
        }
        t
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> Result<F> {
        let offset = self.offset(index)?;
        Ok(self.data[offset])
    }

    pub fn set(&mut self, index: &[usize], value: F) -> Result<()> {
        let offset = self.offset(index)?;
        self.data[offset] = value;
        Ok(())
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return shape_err(
                "index",
                format!("index {index:?} for shape {:?}", self.shape),
            );
        }
        let mut offset = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(NumError::IndexOutOfRange {
                    what: "tensor axis",
                    index: i,
                    size: d,
                });
            }
            offset = offset * d + i;
        }
        Ok(offset)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 view `[numel / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[F] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts the element type, rounding when narrowing.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| {
                let mut x = Vec::new();
                let mut y = Vec::new();
                a.write_le(&mut x);
                b.write_le(&mut y);
                x == y
            })
    }
}
