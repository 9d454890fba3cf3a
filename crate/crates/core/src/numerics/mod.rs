//! Deterministic tensor arithmetic, reverse-mode differentiation and
//! finite-difference oracles.

pub mod fd;
pub mod linalg;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use fd::{finite_diff_gradient, finite_diff_jacobian, relative_error};
pub use ops::conv2d;
pub use rng::{gaussian_sample, uniform_sample, Rng};
pub use tape::{Tape, Var};
pub use tensor::{lit, Real, Tensor};
