//! Scalar element types tensors can store.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumCast};

/// Storage type tag, recorded per tensor in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point scalar a tensor can hold.
///
/// Training and every gradient check default to `f64`; `f32` halves storage
/// at the cost of precision. All random sampling happens in `f64` and is
/// converted on the way in, so the two dtypes draw identical streams.
pub trait Elem: Float + Debug + Display + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("finite f64 converts to any float dtype")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("float widens to f64")
    }

    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn read_le_bytes(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}
