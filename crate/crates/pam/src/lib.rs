//! Files, formats, experiment harness and command line for `pam-core`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod plan_text;
pub mod pretrain;
pub mod report;
pub mod synth;
pub mod weights;

pub use error::{Error, Result};
