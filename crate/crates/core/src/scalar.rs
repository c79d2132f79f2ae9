use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real sample type for grayscale images and statistics: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    #[inline]
    fn of(v: f64) -> Self {
        // Every finite f64 has a (possibly rounded) f32/f64 image.
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn clamp01(self) -> Self {
        self.max(Self::zero()).min(Self::one())
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
