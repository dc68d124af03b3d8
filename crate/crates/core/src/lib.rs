#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod capsnet;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod optim;
pub mod plan;
pub mod raster;
pub mod recurrent;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
