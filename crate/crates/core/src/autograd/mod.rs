//! Dense tensors with a reverse-mode tape, AdamW, finite-difference checks,
//! and the `VFCK1` checkpoint codec.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, op_suite};
pub use graph::{Gradients, Graph, Var, GROUP_NORM_EPS};
pub use optim::{AdamW, AdamWConfig, ParamSet};
pub use tensor::{Element, Tensor};
