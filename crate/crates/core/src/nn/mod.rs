//! Minimal deterministic feed-forward engine: tensors, the fixed layer
//! catalog with hand-written backward passes, optimizers and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
mod param;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, grad_check_module, grad_check_suite, random_case, build_case, relu_margin, smooth_case, CheckLoss, FD_STEP, KINK_MARGIN, GradCheckReport, RandomCase};
pub use layers::{LayerSpec, Mode, Module, Sequential};
pub use optim::{optimizer_step, UpdateRule};
pub use param::Parameter;
pub use scalar::Scalar;
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use scalar::{gemm, Op};
