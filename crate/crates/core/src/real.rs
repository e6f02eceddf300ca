//! Scalar abstraction: f32 for training and inference, f64 for gradient checks.

use num_traits::Float;

/// Floating-point scalar usable by the tensor kernels.
///
/// Everything trains in `f32`; the finite-difference test suites instantiate
/// the same code over `f64` so the oracles can be held to tight tolerances.
pub trait Real:
    Float + num_traits::NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Gauss error function, used by the exact-erf GELU.
    fn erf(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
