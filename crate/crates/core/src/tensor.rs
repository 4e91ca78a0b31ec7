use crate::error::{ApamError, Result};
use crate::real::Real;

/// Dense row-major tensor of rank 0 (scalar), 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    data: Vec<F>,
    shape: Vec<usize>,
}

impl<F: Real> Tensor<F> {
    pub fn new(data: Vec<F>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(ApamError::Shape {
                op: "tensor_new",
                lhs: vec![data.len()],
                rhs: shape,
            });
        }
        Ok(Tensor { data, shape })
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            data: vec![x],
            shape: vec![],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        let n = data.len();
        Tensor {
            data,
            shape: vec![n],
        }
    }

    pub fn matrix(data: Vec<F>, rows: usize, cols: usize) -> Result<Self> {
        Tensor::new(data, vec![rows, cols])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            data: vec![F::zero(); numel],
            shape: shape.to_vec(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
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

    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[F] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise sum of products; shapes must match.
    pub fn dot(&self, other: &Tensor<F>) -> F {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a * *b)
            .sum()
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: F, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * *b;
        }
    }

    pub fn scaled(&self, scale: F) -> Tensor<F> {
        Tensor {
            data: self.data.iter().map(|x| *x * scale).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Lossy dtype conversion.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            data: self.data.iter().map(|x| G::c(x.as_f64())).collect(),
            shape: self.shape.clone(),
        }
    }
}
