// `!(x > 0.0)` is how NaN gets rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boxes;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
mod io;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod slimming;
pub mod tensor;

pub use error::{Error, Result};
