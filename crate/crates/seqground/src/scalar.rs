//! Floating-point scalar abstraction shared by features, model math and losses.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar type usable for feature storage and model arithmetic.
///
/// Implemented for `f32` and `f64`. The associated constants tie each scalar
/// to its on-disk representation in the binary array format.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Dtype code in the binary array file header.
    const DTYPE: u8;
    /// Width of one encoded value in bytes.
    const BYTE_WIDTH: usize;

    fn from_real(x: f64) -> Self;
    fn to_real(self) -> f64;
    /// Draw one standard-normal value from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode one value from the first `BYTE_WIDTH` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 1;
    const BYTE_WIDTH: usize = 4;

    fn from_real(x: f64) -> Self {
        x as f32
    }

    fn to_real(self) -> f64 {
        self as f64
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 2;
    const BYTE_WIDTH: usize = 8;

    fn from_real(x: f64) -> Self {
        x
    }

    fn to_real(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}
