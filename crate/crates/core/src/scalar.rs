//! Floating point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Real scalar the engine computes in: `f32` for training, `f64` for checks.
pub trait Scalar:
    Float + FftNum + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Dtype code used by the S2VT file format.
    const DTYPE_CODE: u32;
    /// Width in bytes of one encoded value.
    const BYTES: usize;

    fn from_real(v: f64) -> Self;
    fn to_real(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE_CODE: u32 = 1;
    const BYTES: usize = 4;

    #[inline]
    fn from_real(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_real(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u32 = 2;
    const BYTES: usize = 8;

    #[inline]
    fn from_real(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_real(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Shorthand for lifting an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_real(v)
}
