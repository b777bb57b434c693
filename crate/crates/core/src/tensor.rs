//! Dense row-major tensors of rank 1..=3 over f32 or f64.

use std::fmt;

use crate::error::{Error, Result};

/// Element type tag used by the binary containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_byte(b: u8) -> Result<Dtype> {
        match b {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Data(format!("unknown dtype byte {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a [`Tensor`]: f32 at train/inference time, f64 in
/// gradient-check mode where finite-difference tolerances are tight.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense tensor, row-major, rank 1..=3. Every element is finite: NaN/Inf
/// anywhere is a contract violation surfaced as `Error::Numeric`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Tensor<S>> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=3, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in dims {dims:?}")));
        }
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} expect {expect} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { dims, data };
        t.validate_finite()?;
        Ok(t)
    }

    /// Like [`Tensor::new`] but skips the finiteness scan. For internal use
    /// on data that is validated elsewhere or about to be validated.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<S>) -> Tensor<S> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor<S> {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(dims: Vec<usize>, value: S) -> Tensor<S> {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    /// 2D constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Tensor<S>> {
        Tensor::new(vec![rows, cols], data)
    }

    /// 1xN row-vector constructor (the tape works on rank-2 values).
    pub fn row(data: Vec<S>) -> Result<Tensor<S>> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.dims[1]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.dims[1] + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        debug_assert_eq!(self.rank(), 2);
        &mut self.data[r * self.dims[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.dims[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite value {v} at flat index {i} of tensor {:?}",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    /// Reinterpret as a different rank without copying (product must match).
    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Tensor<S>> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > 3 || expect != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {dims:?}",
                self.dims,
                self.data.len()
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Convert element type (f32 <-> f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| T::from_f64(Scalar::to_f64(v))).collect(),
        }
    }

    /// L2 norm over all elements.
    pub fn l2_norm(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Raw little-endian bytes of the payload, row-major.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * S::DTYPE.byte_width());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }
}

/// Unit-normalize a vector slice in place; errors on (near-)zero input.
pub fn l2_normalize_slice<S: Scalar>(v: &mut [S], context: &str) -> Result<()> {
    let norm = v.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
    if norm.to_f64() < 1e-12 {
        return Err(Error::Numeric(format!("degenerate {context}: zero norm")));
    }
    for x in v.iter_mut() {
        *x = *x / norm;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_new_checks_shape_and_finiteness() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![1.0; 4]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 2, 2, 2], vec![1.0; 16]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![0, 2], vec![]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn test_reshape_and_accessors() {
        let t = Tensor::<f64>::new(vec![6], (0..6).map(|i| i as f64).collect()).unwrap();
        let m = t.reshaped(vec![2, 3]).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 3);
        assert_eq!(m.at(1, 2), 5.0);
        assert_eq!(m.row_slice(0), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn test_cast_roundtrip() {
        let t = Tensor::<f32>::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }

    #[test]
    fn test_normalize_rejects_zero() {
        let mut v = [0.0f32; 4];
        assert!(l2_normalize_slice(&mut v, "mean").is_err());
        let mut v = [3.0f32, 4.0];
        l2_normalize_slice(&mut v, "mean").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    }
}
