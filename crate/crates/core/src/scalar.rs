//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real floating-point scalar the numerics, losses and encoders are generic over.
///
/// Implemented for `f32` and `f64`. Tolerances quoted throughout the crate
/// assume `f64`; `f32` is supported for inference-style use.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` literal or stored value.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every supported scalar")
    }

    /// Widen to `f64` for serialization and reporting.
    fn widen(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Conversion of a count.
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
