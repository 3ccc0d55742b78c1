//! Dense tensors, reverse-mode differentiation and gradient verification.

pub mod gradcheck;
pub mod reduce;
pub mod tape;
pub mod tensor;

pub use gradcheck::{fd_check, FdOptions, FdReport, Objective, Stencil, TapeObjective};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine_similarity, softmax, Axis, Tensor};
