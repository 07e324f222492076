//! Dense tensors, reverse-mode differentiation and the finite-difference
//! gradient oracle that backs every model in the crate.

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use ops::{activation, dropout, layer_norm, sigmoid, softmax, Activation, Mode, LAYER_NORM_EPS};
pub use params::{Bound, ParamSet};
pub use tape::{bce_grad, bce_mean, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::{matmul, Tensor};
