use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point type used for observations, features and learner weights.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and config values.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Exact ratio of two non-negative integers converted into the scalar type.
pub(crate) fn ratio<F: Scalar>(num: u64, den: u64) -> F {
    F::of(num as f64) / F::of(den as f64)
}
