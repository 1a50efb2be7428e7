use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar used throughout the numerical core (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn from_isize_lossy(v: isize) -> Self {
        Self::from_isize(v).expect("isize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Euler–Mascheroni constant, `-ψ(1)`.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// `ψ′(1) = π²/6`, the variance of the log of a unit exponential variate.
pub const TRIGAMMA_ONE: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;
