use std::io::{Read, Write};

use crate::codec::{put_f32s, put_u32, ByteReader};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub const TENSOR_MAGIC: &[u8; 4] = b"DTNT";

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(crate::error::shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            off = off * d + ix;
        }
        self.data[off]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// DTNT encoding: magic, u32 rank, u32 dims, then f32 LE values.
    pub fn write_dtnt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        put_u32(w, self.shape.len() as u32)?;
        for &d in &self.shape {
            put_u32(w, d as u32)?;
        }
        put_f32s(w, self.data.iter().map(|v| v.as_f64() as f32))?;
        Ok(())
    }

    pub fn to_dtnt_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_dtnt(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_dtnt<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.expect_magic(TENSOR_MAGIC)?;
        let rank_at = r.offset();
        let rank = r.u32("rank")? as usize;
        if rank > 16 {
            return Err(TensorError::Format {
                offset: rank_at,
                msg: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape.iter().product();
        let vals = r.f32s(n, "tensor data")?;
        Ok(Self {
            shape,
            data: vals.into_iter().map(|v| T::of(v as f64)).collect(),
        })
    }

    pub fn from_dtnt_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let t = Self::read_dtnt(&mut r)?;
        r.expect_eof()?;
        Ok(t)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_element_count() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn dtnt_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_dtnt_bytes();
        let mut want = b"DTNT".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(Tensor::<f32>::from_dtnt_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_dtnt_names_offset() {
        let t = Tensor::<f32>::zeros(&[3, 2]);
        let bytes = t.to_dtnt_bytes();
        let err = Tensor::<f32>::from_dtnt_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            TensorError::Format { offset, .. } => assert_eq!(offset, 16),
            other => panic!("unexpected {other}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::<f32>::from_dtnt_bytes(&bad),
            Err(TensorError::Format { offset: 0, .. })
        ));
    }
}
