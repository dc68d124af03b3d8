//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod shape;
pub mod suite;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use shape::Padding;
