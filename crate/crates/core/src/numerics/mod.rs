//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use params::{
    accumulate_grads, scale_grads, Binder, ParamStore, Trainable, CHECKPOINT_FORMAT_VERSION,
};
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::{log_softmax, matmul, softmax, Tensor};
