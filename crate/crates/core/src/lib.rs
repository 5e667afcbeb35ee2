#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod analysis;
pub mod data;
pub mod error;
pub mod featurizers;
pub mod metrics;
pub mod nn;
pub mod probing;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
