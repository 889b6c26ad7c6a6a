//! Small dense tensors, a reverse-mode tape, finite-difference checking and
//! the Adam optimizer.

mod adam;
pub(crate) mod gemm;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, relative_error};
pub use graph::{Graph, Var};
pub(crate) use params::hex_digest;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{l2_normalize_rows, log_sum_exp, softmax, softmax_cross_entropy, Tensor};
