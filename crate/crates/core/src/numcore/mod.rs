//! Dense numeric kernel: tensors, layer passes, SGD and gradient checking.

mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, richardson_check, GradCheckReport};
pub use ops::{affine_backward, affine_forward, log_softmax, relu, relu_backward, softmax, softmax_rows, AffineGrads};
pub use optim::{sgd_step, Param, SgdConfig};
pub use tensor::Tensor;

pub(crate) use tensor::{dot, norm};
