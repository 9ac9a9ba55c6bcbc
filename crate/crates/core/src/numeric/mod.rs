//! Dense numerics: vectors, matrices, a reverse-mode tape, finite-difference
//! checking and first-order optimizers.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{FreezeMask, GradRecord, GroupId, ParamSet};
pub use tape::{Segment, Tape, Var};
pub use tensor::{affine, argmax, relu, sigmoid, softmax, softmax_xent, tanh, Tensor1, Tensor2};
