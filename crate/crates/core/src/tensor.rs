//! Dense row-major tensors and the BAT1 binary format.
//!
//! Layout of a BAT1 file, all integers little-endian, no padding:
//!
//! ```text
//! magic   4 bytes   "BAT1" (0x42 0x41 0x54 0x31)
//! version u32       1
//! dtype   u8        0 = f32, 1 = f64, 2 = i64
//! ndim    u8        1..=4
//! dims    ndim x u64
//! payload product(dims) scalars, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Element};

pub const MAGIC: [u8; 4] = *b"BAT1";
pub const VERSION: u32 = 1;
pub const MAX_NDIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    dims: Vec<usize>,
    data: Vec<E>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_NDIM {
        return Err(Error::BadDims(format!(
            "ndim {} outside 1..={MAX_NDIM}",
            dims.len()
        )));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::BadDims(format!("element count of {dims:?} overflows")))
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        Ok(Self {
            dims,
            data: vec![E::default(); n],
        })
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * E::DTYPE.size_of()
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Serializes into BAT1 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + self.nbytes());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(E::DTYPE.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match AnyTensor::from_bytes(bytes)? {
            any if any.dtype() == E::DTYPE => Ok(any.downcast().expect("dtype checked")),
            any => Err(Error::DtypeMismatch {
                expected: E::DTYPE.name(),
                found: any.dtype().name(),
            }),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A tensor whose dtype is only known at run time (as read from disk).
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64(Tensor<i64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::I64(_) => DType::I64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
            AnyTensor::I64(t) => t.dims(),
        }
    }

    pub fn downcast<E: Element>(self) -> Option<Tensor<E>> {
        let boxed: Box<dyn std::any::Any> = match self {
            AnyTensor::F32(t) => Box::new(t),
            AnyTensor::F64(t) => Box::new(t),
            AnyTensor::I64(t) => Box::new(t),
        };
        boxed.downcast::<Tensor<E>>().ok().map(|b| *b)
    }

    /// Integer view: i64 tensors pass through, float tensors must hold integers.
    pub fn to_i64(&self) -> Result<Vec<i64>> {
        fn conv<I: Iterator<Item = f64>>(it: I) -> Result<Vec<i64>> {
            it.map(|x| {
                if x.fract() == 0.0 && x.is_finite() {
                    Ok(x as i64)
                } else {
                    Err(Error::Parse(format!("expected integer value, found {x}")))
                }
            })
            .collect()
        }
        match self {
            AnyTensor::I64(t) => Ok(t.data().to_vec()),
            AnyTensor::F32(t) => conv(t.data().iter().map(|&x| x as f64)),
            AnyTensor::F64(t) => conv(t.data().iter().copied()),
        }
    }

    /// Float view widened to f64. Integer tensors are converted.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            AnyTensor::F32(t) => t.data().iter().map(|&x| x as f64).collect(),
            AnyTensor::F64(t) => t.data().to_vec(),
            AnyTensor::I64(t) => t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 10 {
            return Err(Error::TruncatedPayload {
                expected: 10,
                actual: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let dtype = DType::from_code(bytes[8]).ok_or(Error::BadDtype(bytes[8]))?;
        let ndim = bytes[9] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::BadDims(format!(
                "ndim {ndim} outside 1..={MAX_NDIM}"
            )));
        }
        let header = 10 + 8 * ndim;
        if bytes.len() < header {
            return Err(Error::BadDims(format!(
                "header declares {ndim} dims but file ends after {} bytes",
                bytes.len()
            )));
        }
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .map(|d| usize::try_from(d).map_err(|_| Error::BadDims(format!("dim {d} too large"))))
            .collect::<Result<_>>()?;
        let n = check_dims(&dims)?;
        let expected = n
            .checked_mul(dtype.size_of())
            .ok_or_else(|| Error::BadDims(format!("payload size of {dims:?} overflows")))?;
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(Error::TruncatedPayload {
                expected,
                actual: payload.len(),
            });
        }
        fn decode<E: Element>(dims: Vec<usize>, payload: &[u8]) -> Tensor<E> {
            let data = payload
                .chunks_exact(E::DTYPE.size_of())
                .map(E::read_le)
                .collect();
            Tensor { dims, data }
        }
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(decode(dims, payload)),
            DType::F64 => AnyTensor::F64(decode(dims, payload)),
            DType::I64 => AnyTensor::I64(decode(dims, payload)),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => t.to_bytes(),
            AnyTensor::F64(t) => t.to_bytes(),
            AnyTensor::I64(t) => t.to_bytes(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_2x3_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bat1");
        let t = Tensor::new(vec![2, 3], vec![1.0f32, -2.5, 3.25, 0.0, f32::MIN, 7.0]).unwrap();
        t.write(&path).unwrap();
        let back = Tensor::<f32>::read(&path).unwrap();
        assert_eq!(back.dims(), &[2, 3]);
        assert_eq!(back.to_bytes(), t.to_bytes());
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], &[0x42, 0x41, 0x54, 0x31]);
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &1u64.to_le_bytes());
        assert_eq!(&b[18..26], &2u64.to_le_bytes());
        assert_eq!(b.len(), 26 + 16);
    }

    #[test]
    fn wrong_magic() {
        let mut b = Tensor::from_vec(vec![1.0f32]).to_bytes();
        b[0] = b'X';
        assert!(matches!(AnyTensor::from_bytes(&b), Err(Error::BadMagic)));
    }

    #[test]
    fn payload_length_mismatch() {
        let mut b = Tensor::new(vec![2, 2], vec![0.0f32; 4]).unwrap().to_bytes();
        b.truncate(b.len() - 4);
        assert!(matches!(
            AnyTensor::from_bytes(&b),
            Err(Error::TruncatedPayload {
                expected: 16,
                actual: 12
            })
        ));
        let mut long = Tensor::from_vec(vec![0.0f32; 2]).to_bytes();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(
            AnyTensor::from_bytes(&long),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn bad_dims() {
        let mut b = Tensor::from_vec(vec![0.0f32]).to_bytes();
        b[9] = 5;
        assert!(matches!(AnyTensor::from_bytes(&b), Err(Error::BadDims(_))));
        b[9] = 0;
        assert!(matches!(AnyTensor::from_bytes(&b), Err(Error::BadDims(_))));
        assert!(Tensor::<f32>::zeros(vec![1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
    }

    #[test]
    fn dtype_mismatch() {
        let b = Tensor::from_vec(vec![1.0f32]).to_bytes();
        assert!(matches!(
            Tensor::<f64>::from_bytes(&b),
            Err(Error::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn integer_views() {
        let t = AnyTensor::F64(Tensor::from_vec(vec![1.0, 2.0]));
        assert_eq!(t.to_i64().unwrap(), vec![1, 2]);
        let t = AnyTensor::F64(Tensor::from_vec(vec![1.5]));
        assert!(t.to_i64().is_err());
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0usize..5, 1..=4)
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(dims in dims_strategy(), seed in any::<u64>(), dtype in 0u8..3) {
            let n: usize = dims.iter().product();
            let bits: Vec<u64> = (0..n as u64).map(|i| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i.wrapping_mul(0xD1B5_4A32_D192_ED03))).collect();
            let any = match dtype {
                0 => AnyTensor::F32(Tensor::new(dims.clone(), bits.iter().map(|&b| f32::from_bits(b as u32)).collect()).unwrap()),
                1 => AnyTensor::F64(Tensor::new(dims.clone(), bits.iter().map(|&b| f64::from_bits(b)).collect()).unwrap()),
                _ => AnyTensor::I64(Tensor::new(dims.clone(), bits.iter().map(|&b| b as i64).collect()).unwrap()),
            };
            let bytes = any.to_bytes();
            let back = AnyTensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.dims(), &dims[..]);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
