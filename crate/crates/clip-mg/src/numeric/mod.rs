//! Dense tensor engine with reverse-mode differentiation.
//!
//! All other modules build on this: a value-arena tape ([`Tape`]), handles
//! into it ([`Var`]), forward ops with backward closures ([`ops`]), a 3-D
//! convolution kernel, and a finite-difference gradient checker.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use conv::conv3d;
pub use gradcheck::{grad_check, GradCheckSettings};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
