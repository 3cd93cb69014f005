use std::sync::Arc;

use super::real::Real;
use crate::error::{Error, Result};

/// Dense row-major tensor. The payload is shared, so clones are cheap and a
/// tensor never changes after construction.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::c(x)).collect())
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_parts(vec![n, n], data)
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

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Mutable access to the payload, copying it first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|x| U::from_f64(x.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for {r} rows"
            )));
        }
        Ok(Self::from_parts(
            vec![end - start, c],
            self.data[start * c..end * c].to_vec(),
        ))
    }

    /// Stacks rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.dims2()?.1,
            None => return Err(Error::invalid("concat_rows of nothing")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_parts(vec![rows, cols], data))
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }
}
