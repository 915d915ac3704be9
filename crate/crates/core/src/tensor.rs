//! Dense row-major tensor and the value-level operations the losses build on.

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::scalar::Scalar;

/// Default guard used when normalizing rows with (near) zero norm.
pub const NORM_EPS: f64 = 1e-12;

/// Dense, contiguous, row-major array of real scalars.
///
/// A tensor of rank 0 (empty shape) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting zero extents, length mismatches and non-finite values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs; shape consistency is debug-checked.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            if i >= e {
                return None;
            }
            flat = flat * e + i;
        }
        Some(self.data[flat])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Flattens the first two axes of a rank-3 tensor: `(D1, D2, D3) -> (D1·D2, D3)`.
pub fn reshape_psi<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    match *f.shape() {
        [d1, d2, d3] => f.reshape([d1 * d2, d3]),
        _ => Err(shape_err!("psi reshape expects rank 3, got {:?}", f.shape())),
    }
}

/// Divides each slice along the last axis by `max(‖slice‖₂, eps)`.
pub fn normalize_last_dim<T: Scalar>(f: &Tensor<T>, eps: T) -> Tensor<T> {
    let mut out = vec![T::zero(); f.numel()];
    kernels::normalize_rows(f.data(), f.last_dim(), eps, &mut out);
    Tensor::from_raw(f.shape().to_vec(), out)
}

/// `A Aᵀ` for a rank-2 tensor.
pub fn gram<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [r, d] = *a.shape() else {
        return Err(shape_err!("gram expects rank 2, got {:?}", a.shape()));
    };
    let mut out = vec![T::zero(); r * r];
    kernels::gram_into(a.data(), r, d, &mut out);
    Ok(Tensor::from_raw(vec![r, r], out))
}

/// `‖A − B‖²_F`.
pub fn frob_sq_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(shape_err!("frobenius gap of {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum())
}
