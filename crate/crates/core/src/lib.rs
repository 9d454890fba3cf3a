#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data_io;
pub mod error;
pub mod flow;
pub mod generation;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{CheckpointError, Error, Result};
