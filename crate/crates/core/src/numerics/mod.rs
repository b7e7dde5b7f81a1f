//! Dense linear algebra, a reverse-mode tape, and a finite-difference
//! gradient checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::grad_check;
pub use matrix::{cross_entropy, log_softmax_rows, matmul, matmul_nt, matmul_tn, relu, softmax_rows, Matrix};
pub use tape::{Grads, NamedParam, ParamId, ParamStore, Tape, Var, LAYER_NORM_EPS};
