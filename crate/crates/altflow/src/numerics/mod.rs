//! Tensor container and deterministic RNG shared by every other module.

mod rng;
mod tensor;

pub use rng::Rng;
pub use tensor::{Axis, AxisSet, Reduction, Shape4, Tensor4};
