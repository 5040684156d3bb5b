//! Scalar abstraction for the numeric kernels.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the math kernels (divergences, geodesy, shortest
/// paths) are generic over. Blanket-implemented, so `f32` and `f64` both
/// qualify; the domain pipeline instantiates everything at [`crate::Scalar`].
pub trait Real: Float + FromPrimitive + std::fmt::Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + std::fmt::Debug + Send + Sync + 'static {}
