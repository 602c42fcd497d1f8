use crate::error::{Error, Result};
use num_traits::Float;

/// Element type for all model math. Implemented for `f32` (training) and
/// `f64` (gradient checking).
pub trait Scalar:
    Float + num_traits::FromPrimitive + num_traits::NumAssign + std::fmt::Debug + Send + Sync + 'static
{
    const DTYPE_TAG: u8;
    const BYTES: usize;

    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).unwrap()
    }
    fn to_f64s(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 4;
    const BYTES: usize = 4;

    fn to_f64s(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 8;
    const BYTES: usize = 8;

    fn to_f64s(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense multi-dimensional array with row-major flat storage.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> NdArray<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(NdArray { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        NdArray {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let numel: usize = shape.iter().product();
        NdArray {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        NdArray {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        NdArray::new(shape, data.iter().map(|&v| F::of_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols view of a 2D array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "expected 2D array, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> NdArray<G> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of_f64(v.to_f64s())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_length_mismatch_is_error() {
        assert!(NdArray::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_preserves_data() {
        let a = NdArray::<f64>::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let b = a.clone().reshaped(vec![3, 2]).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.reshaped(vec![4, 2]).is_err());
    }
}
