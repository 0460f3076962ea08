use crate::error::{Error, Result};
use crate::scalar::{cast_slice, Scalar};

/// Dense row-major array with a shape of positive extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1-D tensor; panics on an empty vector.
    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix built from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Usage("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    #[inline]
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    /// Number of rows when viewed as `[len / cols, cols]`.
    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: cast_slice(&self.data),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }
}
