//! Element type abstraction: the whole engine is generic over f32/f64.
//!
//! Training runs default to f32; verification suites (gradient checks,
//! equivalence tests) instantiate f64, where finite-difference tolerances
//! are meaningful.

use num_traits::Float;

/// Scalar element of tensors. `f32` and `f64` are the only implementors.
pub trait Scalar:
    Float + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Width in bytes, also used as the checkpoint dtype tag.
    const WIDTH: u8;

    /// Open-interval margin for the gate blend: saturated sigmoids are
    /// squeezed to [margin, 1-margin], the tightest band this precision
    /// can represent strictly inside (0, 1).
    const GATE_SQUEEZE: f64;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Append the little-endian byte representation.
    fn write_le(self, out: &mut Vec<u8>);

    /// Read one value from exactly `WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;
    const GATE_SQUEEZE: f64 = 1e-7;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;
    const GATE_SQUEEZE: f64 = 1e-12;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}
