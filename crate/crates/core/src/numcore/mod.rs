//! Deterministic f64 tensor engine with reverse-mode autodiff.

mod conv;
pub mod cost;
mod gradcheck;
mod linalg;
mod ops;
mod rng;
mod stats;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, COORDS_PER_TENSOR};
pub use linalg::LAYER_NORM_EPS;
pub use rng::Rng;
pub use stats::INSTANCE_EPS;
pub use tensor::Tensor;
