//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the engine is generic over (`f32` or `f64`).
///
/// Geometry (voxel spacing, distances, kernel widths) is kept in `f64`;
/// every value that flows through the dose model, the metrics, the
/// calibration filters and the decision layer uses `T`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + FromStr + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for values `T` cannot hold.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("value not representable in scalar type")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("count not representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + FromStr + Default + Debug + Display + Sum + Send + Sync + 'static
{
}

/// Sum in fixed index order so results never depend on a parallel schedule.
pub(crate) fn ordered_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    values.into_iter().fold(T::zero(), |acc, v| acc + v)
}
