//! Minimal dense numerical kernel: matrices, a fixed layer vocabulary with
//! exact reverse-mode gradients, optimizers, and a finite-difference oracle.

mod gradcheck;
mod matrix;
mod network;
mod optim;
mod params;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use matrix::{linear_forward, log_softmax, relu_forward, relu_grad, softmax, Matrix};
pub(crate) use matrix::{check_tau, log_softmax_unchecked, softmax_unchecked};
pub use network::{Batch, GradTape, Layer, Network};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{sgd_step, ParamVector};
