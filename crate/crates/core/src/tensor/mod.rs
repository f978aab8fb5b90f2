//! Dense `f64` tensors, a reverse-mode tape, Adam and gradient checking.
//!
//! [`Tensor`] is an immutable value with a shared buffer: cloning is cheap
//! and mutation goes through copy-on-write ([`Tensor::data_mut`]). The tape
//! lives in [`graph`]; every neural model in the crate is built on it.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use graph::{Graph, Var};
pub use params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Panicking constructor for internal call sites where the shape is
    /// computed from the data length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = crate::rng::normal_vec(rng, n)
            .into_iter()
            .map(|v| v * std)
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), crate::rng::uniform_vec(rng, n, lo, hi))
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape("dims2", other, &[0, 0])),
        }
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.numel() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Gathers rows (first axis) into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = if self.shape[0] == 0 {
            0
        } else {
            self.numel() / self.shape[0]
        };
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::from_parts(shape, data)
    }

    /// Concatenates tensors along the first axis.
    pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack_rows of nothing"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("stack_rows", &first.shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
