//! Continual learning with a frozen shared extractor, per-task pruned adaptation modules
//! and a unified classifier, plus test-time module routing.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod baseline;
pub mod error;
pub mod gemm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pruning;
pub mod router;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
