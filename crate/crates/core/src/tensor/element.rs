use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Floating-point scalar a graph is built over. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Additive mask value standing in for negative infinity. Half the most
    /// negative finite value, so adding a bounded logit never overflows and
    /// `exp` of the shifted value underflows to exactly zero.
    fn mask_value() -> Self {
        Self::min_value() / Self::of(2.0)
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// True when an additive mask entry suppresses its logit.
#[inline]
pub fn is_masked<T: Element>(m: T) -> bool {
    m <= T::mask_value() / T::of(2.0)
}
