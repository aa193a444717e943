//! Personalized federated learning with residual adapters on a frozen
//! backbone, proximal personalization and server-side ensemble distillation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fl_runtime;
pub mod metrics_theory;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor_nn;

pub use error::{Error, Result};
