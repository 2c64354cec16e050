//! Floating-point abstraction for the numeric kernels.
//!
//! Training runs in `f32`; gradient-check oracles and geometry tests
//! instantiate the same code in `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Real:
    Float
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype tag used in serialized containers.
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `F::from_f64` in formula-heavy code.
#[inline(always)]
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x)
}
