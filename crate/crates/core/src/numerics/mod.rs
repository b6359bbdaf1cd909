//! Dense `f64` matrices, forward kernels with their vector-Jacobian products,
//! a reverse-mode tape, and a central-difference gradient checker.

mod gradcheck;
mod kernels;
mod matrix;
mod tape;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use kernels::{
    cross_entropy, cross_entropy_backward, gelu, gelu_backward, layer_norm, layer_norm_backward,
    masked_row_softmax, masked_row_softmax_backward, matmul, matmul_nt, matmul_tn, LayerNormCache,
};
pub use matrix::{Mask, Matrix};
pub use tape::{Gradients, Tape, Var};
