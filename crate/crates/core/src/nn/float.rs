use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float as NumFloat, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type the engine computes in: `f32` for training, `f64` for
/// gradient checks.
pub trait Float:
    NumFloat + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }

    fn as_f32(self) -> f32 {
        ToPrimitive::to_f32(&self).expect("finite conversion")
    }
}

impl Float for f32 {}
impl Float for f64 {}
