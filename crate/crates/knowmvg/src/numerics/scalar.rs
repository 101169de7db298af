//! Scalar abstraction: every numeric routine in this crate is generic over
//! [`Real`], and `f32`/`f64` are the two supported instantiations.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

pub trait Real:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Dtype tag used by the checkpoint format.
    const DTYPE: &'static str;

    /// Lossy conversion from `f64` (named to avoid clashing with
    /// `FromPrimitive::from_f64`).
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// IEEE-754 total order; used wherever a value sort must be deterministic.
    fn total_order(&self, other: &Self) -> Ordering;
}

macro_rules! impl_real {
    ($($t:ty => $name:literal),+ $(,)?) => {$(
        impl Real for $t {
            const DTYPE: &'static str = $name;

            #[inline]
            fn cast(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn total_order(&self, other: &Self) -> Ordering {
                self.total_cmp(other)
            }
        }
    )+};
}

impl_real!(f32 => "f32", f64 => "f64");

#[cfg(test)]
mod tests {
    use super::*;

    fn magnitude<T: Real>(x: T, y: T) -> T {
        (x * x + y * y).sqrt()
    }

    #[test]
    fn generic_code_runs_for_both_widths() {
        assert_eq!(magnitude(3.0f32, 4.0f32), 5.0f32);
        assert_eq!(magnitude(3.0f64, 4.0f64), 5.0f64);
    }

    #[test]
    fn total_order_handles_signed_zero() {
        assert_eq!((-0.0f64).total_order(&0.0), Ordering::Less);
    }
}
