//! Dense `f64` tensors, reverse-mode differentiation and the
//! finite-difference oracle used to verify it.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Decision, DecisionLog, DecisionMode, Graph, Var};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::Tensor;
