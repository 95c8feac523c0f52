//! Training and benchmarking harness for contrastive vision-language reward objectives.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub(crate) mod container;
pub mod datapipe;
pub mod encoders;
pub mod error;
pub mod evalbench;
pub mod numcore;
pub mod objectives;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
