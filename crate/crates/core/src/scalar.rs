//! Element and scalar traits.
//!
//! [`Element`] covers everything that can live in a [`Tensor`](crate::Tensor)
//! and be written to a BAT1 file. [`Scalar`] narrows that to the floating
//! point types the kernels are generic over (f32 and f64).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// On-disk dtype code of the BAT1 format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I64 => "i64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "i64" => Ok(DType::I64),
            other => Err(format!("unknown dtype `{other}`")),
        }
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for f64 {}
    impl Sealed for i64 {}
}

/// A fixed-width little-endian tensor element.
pub trait Element:
    sealed::Sealed + Copy + Default + Debug + PartialEq + Send + Sync + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// `bytes.len()` must equal `DTYPE.size_of()`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte element"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte element"))
    }
}

impl Element for i64 {
    const DTYPE: DType = DType::I64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        i64::from_le_bytes(bytes.try_into().expect("8-byte element"))
    }
}

/// Floating point payload type of lattices and weights: f32 or f64.
///
/// Kernels read payload values as `S` and accumulate in f64.
pub trait Scalar: Element + Float + FromPrimitive + ToPrimitive + Display {
    /// Lossless widening to the f64 accumulator type.
    fn to_acc(self) -> f64;

    /// Rounding narrowing from the accumulator type.
    fn from_acc(x: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_acc(self) -> f64 {
        self as f64
    }

    #[inline]
    fn from_acc(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_acc(self) -> f64 {
        self
    }

    #[inline]
    fn from_acc(x: f64) -> Self {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtype_codes_round_trip() {
        for d in [DType::F32, DType::F64, DType::I64] {
            assert_eq!(DType::from_code(d.code()), Some(d));
            assert_eq!(d.name().parse::<DType>().unwrap(), d);
        }
        assert_eq!(DType::from_code(7), None);
    }

    #[test]
    fn le_encoding() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        assert_eq!(buf, 1.5f32.to_le_bytes());
        assert_eq!(f32::read_le(&buf), 1.5);
        buf.clear();
        (-3i64).write_le(&mut buf);
        assert_eq!(i64::read_le(&buf), -3);
    }
}
