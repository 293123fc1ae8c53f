//! Dense row-major tensors with reverse-mode differentiation, parameter
//! storage, an Adam optimizer and a checkpoint container.

mod checkpoint;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointError, TensorRecord};
pub use gradcheck::{grad_check, grad_check_params, grad_check_params_step, ParamCheck};
pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{BatchStats, Gradients, Result, Tape, TensorError, Var};
