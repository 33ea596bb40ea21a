//! Scalar abstraction over the floating-point element type.
//!
//! All numeric kernels are generic over [`Scalar`]: training runs at `f32`,
//! verification suites (gradient checks, rank probes, oracles) at `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type accepted by tensors and the autodiff graph.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Conversion from `f64` literals and accumulated statistics.
    fn from_real(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to Scalar")
    }

    /// Widen to `f64` for accumulation and reporting.
    fn to_real(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
