//! Dense tensors, probability distributions, and reverse-mode differentiation.

mod distribution;
pub mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use distribution::{argmax, kl_divergence, softmax_temp, Distribution, LOG_CLAMP};
pub use gradcheck::{compare_with_finite_differences, gradient_check};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
