//! Scalar abstraction shared by the vector arithmetic, the schedules and the
//! bound formulas.
//!
//! Everything that only needs field operations is written against [`Scalar`],
//! so the same code evaluates in `f64` for simulation and in exact rationals
//! when a test needs to assert an identity without floating-point slack.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

/// Exact rational with machine-word components. Large enough for every
/// schedule the crate evaluates (denominators stay below `T(T+1)(2T+1)`).
pub type Exact = Ratio<i128>;

/// Arbitrary-precision rational, used where inputs come from `f64` values.
pub type BigExact = BigRational;

pub trait Scalar: Num + Signed + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive {
    fn from_usize_exact(n: usize) -> Self {
        Self::from_usize(n).expect("integer representable in scalar")
    }

    /// Smallest integer not below `self`, `None` when negative or not finite.
    fn ceil_to_u64(&self) -> Option<u64>;

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn max_of(a: Self, b: Self) -> Self {
        if a >= b {
            a
        } else {
            b
        }
    }
}

impl Scalar for f64 {
    fn ceil_to_u64(&self) -> Option<u64> {
        if self.is_finite() && *self >= 0.0 {
            Some(self.ceil() as u64)
        } else {
            None
        }
    }
}

impl Scalar for f32 {
    fn ceil_to_u64(&self) -> Option<u64> {
        if self.is_finite() && *self >= 0.0 {
            Some(self.ceil() as u64)
        } else {
            None
        }
    }
}

impl Scalar for Exact {
    fn ceil_to_u64(&self) -> Option<u64> {
        if self.is_negative() {
            return None;
        }
        self.ceil().to_integer().to_u64()
    }
}

impl Scalar for BigExact {
    fn ceil_to_u64(&self) -> Option<u64> {
        if self.is_negative() {
            return None;
        }
        self.ceil().to_integer().to_u64()
    }
}

/// Exact rational image of a finite `f64`.
pub fn exact_from_f64(x: f64) -> Option<BigExact> {
    BigRational::from_float(x)
}

/// Integer as an exact big rational.
pub fn big_int(n: i64) -> BigExact {
    BigRational::from_integer(BigInt::from(n))
}
