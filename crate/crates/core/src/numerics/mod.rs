//! Dense `f64` tensors, reverse-mode differentiation, and a finite-difference oracle.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff, relative_error, RELATIVE_ERROR_FLOOR};
pub use tape::{
    log_sum_exp, masked_row_softmax, sigmoid, softplus, Gradients, Tape, Var, MASK_SENTINEL,
};
pub use tensor::Tensor;
