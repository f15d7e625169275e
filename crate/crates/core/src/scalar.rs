//! Scalar abstraction: every numerical routine in the crate is generic over
//! [`Scalar`], instantiated as `f32` for training and `f64` for gradient
//! checks and the bound verifier.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal convertible to scalar")
    }

    /// Round-trip to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
