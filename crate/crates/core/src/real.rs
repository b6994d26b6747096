//! Scalar abstraction shared by the network code.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub trait Real:
    LinalgScalar
    + ScalarOperand
    + Float
    + Sum
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Little-endian width in bytes, used by the checkpoint format.
    const BYTES: usize;
    const NAME: &'static str;
}

impl Real for f32 {
    fn c(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    fn c(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
}
