//! Differentiable numerical substrate: matrices, parameters, the autodiff
//! tape, and the optimizer.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod param;
pub mod tape;

pub use matrix::RealMatrix;
pub use optim::{OptimizerConfig, OptimizerState};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{softmax_in_place, AttnMask, Tape, Var};
