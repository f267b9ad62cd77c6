//! Dense tensors, the gradient tape, optimizers and the finite-difference
//! oracle.

mod checkpoint;
pub mod conv;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

use std::collections::BTreeMap;

pub use checkpoint::{Checkpoint, ManifestEntry};
pub use conv::ConvGeom;
pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckConfig, GradCheckReport, GroupReport, Probe,
};
pub use optim::{AdamConfig, AdamState, EmaState};
pub use tape::{sigmoid, softmax_in_place, CustomOp, Gradients, Tape, Var, SIGMOID_CLAMP};
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::gemm;

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;
