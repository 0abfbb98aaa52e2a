//! Tensor kernel, seeded randomness, reverse-mode differentiation and a
//! finite-difference gradient checker.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, hadamard, l2_normalize, matmul, relu, sigmoid, softmax, sum_rows, Tensor};
